#include <cstdio>

int main() {
    std::puts("evreg: no subcommand given");
    return 2;
}
