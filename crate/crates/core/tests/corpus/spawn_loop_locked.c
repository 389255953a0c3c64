// expect: no-race
#include <pthread.h>

int total;
pthread_mutex_t m = PTHREAD_MUTEX_INITIALIZER;

void *add(void *arg) {
    pthread_mutex_lock(&m);
    total = total + 2;
    pthread_mutex_unlock(&m);
    return NULL;
}

int main() {
    pthread_t t[3];
    int i;
    for (i = 0; i < 3; i++) {
        pthread_create(&t[i], NULL, add, NULL);
    }
    for (i = 0; i < 3; i++) {
        pthread_join(t[i], NULL);
    }
    return 0;
}
