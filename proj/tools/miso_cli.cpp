#include "miso/cli.hpp"

int main(int argc, char** argv) { return miso::cli::run(argc, argv); }
