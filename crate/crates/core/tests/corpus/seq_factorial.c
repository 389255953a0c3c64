// expect: no-race
int fact;

int main() {
    int i;
    fact = 1;
    i = 1;
    while (i <= 6) {
        fact = fact * i;
        i += 1;
    }
    return fact;
}
