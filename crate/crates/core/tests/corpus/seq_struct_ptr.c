// expect: no-race
struct counter {
    int hits;
    int misses;
};

struct counter c;

void record(struct counter *k, int hit) {
    if (hit) {
        k->hits = k->hits + 1;
    } else {
        k->misses = k->misses + 1;
    }
}

int main() {
    record(&c, 1);
    record(&c, 0);
    record(&c, 1);
    return c.hits;
}
