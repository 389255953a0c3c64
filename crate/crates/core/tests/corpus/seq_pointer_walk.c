// expect: no-race
int buf[4];

int main() {
    int *p;
    int i;
    p = buf;
    for (i = 0; i < 4; i++) {
        *p = i + 10;
        p = p + 1;
    }
    return buf[3];
}
