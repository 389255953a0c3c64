// expect: race
#include <pthread.h>

void *compute(void *arg) {
    int *out;
    out = arg;
    *out = 21;
    return NULL;
}

int main() {
    pthread_t t;
    int x;
    int y;
    x = 0;
    pthread_create(&t, NULL, compute, &x);
    y = x;
    pthread_join(t, NULL);
    return 0;
}
