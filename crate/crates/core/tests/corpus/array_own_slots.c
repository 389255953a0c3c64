// expect: no-race
#include <pthread.h>

int slots[2];

void *first(void *arg) {
    slots[0] = 1;
    return NULL;
}

void *second(void *arg) {
    slots[1] = 2;
    return NULL;
}

int main() {
    pthread_t a, b;
    pthread_create(&a, NULL, first, NULL);
    pthread_create(&b, NULL, second, NULL);
    pthread_join(a, NULL);
    pthread_join(b, NULL);
    return slots[0] + slots[1];
}
