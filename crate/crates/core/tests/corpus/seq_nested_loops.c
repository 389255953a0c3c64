// expect: no-race
int cells;

int main() {
    int i;
    int j;
    cells = 0;
    for (i = 0; i < 4; i++) {
        for (j = 0; j < i; j++) {
            cells = cells + 1;
        }
    }
    return cells;
}
