// expect: race
#include <pthread.h>

int buf[8];

void *left(void *arg) {
    buf[3] = 1;
    return NULL;
}

void *right(void *arg) {
    int i;
    i = 3;
    buf[i] = 2;
    return NULL;
}

int main() {
    pthread_t a, b;
    pthread_create(&a, NULL, left, NULL);
    pthread_create(&b, NULL, right, NULL);
    pthread_join(a, NULL);
    pthread_join(b, NULL);
    return 0;
}
