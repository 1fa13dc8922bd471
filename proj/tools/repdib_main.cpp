#include "repdib/cli.hpp"

int main(int argc, char** argv) { return repdib::cli::run(argc, argv); }
