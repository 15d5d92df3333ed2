#include "compvae/cli.hpp"

int main(int argc, char** argv) { return compvae::cli::run(argc, argv); }
