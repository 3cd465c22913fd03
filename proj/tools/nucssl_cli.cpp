#include "nucssl/cli.hpp"

int main(int argc, char** argv) { return nucssl::run_cli(argc, argv); }
