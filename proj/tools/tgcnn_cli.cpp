#include "tgcnn/cli.hpp"

int main(int argc, char** argv) { return tgcnn::cli::cli_main(argc, argv); }
