#include "dpstride/cli.hpp"

int main(int argc, char** argv) { return dpstride::cli::run(argc, argv); }
