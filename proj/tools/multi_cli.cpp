#include <cstdio>

int main() {
    std::puts("multi: subcommands not wired up yet");
    return 0;
}
