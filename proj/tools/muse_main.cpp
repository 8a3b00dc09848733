#include "muse/cli.hpp"

int main(int argc, char** argv) { return muse::run_cli(argc, argv); }
