// expect: race
#include <pthread.h>

int data;

void *worker(void *arg) {
    data = 1;
    return NULL;
}

int main() {
    pthread_t t;
    pthread_create(&t, NULL, worker, NULL);
    data = 2;
    pthread_join(t, NULL);
    return 0;
}
