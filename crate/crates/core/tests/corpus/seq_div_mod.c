// expect: no-race
int q;
int r;

int main() {
    int n;
    n = 47;
    q = n / 5;
    r = n % 5;
    return q + r;
}
