#include <sanlab/cli.hpp>

int main(int argc, char** argv)
{
  return sanlab::run_cli(argc, argv);
}
