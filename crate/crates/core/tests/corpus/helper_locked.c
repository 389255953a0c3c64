// expect: no-race
#include <pthread.h>

int level;
pthread_mutex_t m = PTHREAD_MUTEX_INITIALIZER;

void set_level(int v) {
    pthread_mutex_lock(&m);
    level = v;
    pthread_mutex_unlock(&m);
}

void *low(void *arg) {
    set_level(1);
    return NULL;
}

void *high(void *arg) {
    set_level(9);
    return NULL;
}

int main() {
    pthread_t a, b;
    pthread_create(&a, NULL, low, NULL);
    pthread_create(&b, NULL, high, NULL);
    pthread_join(a, NULL);
    pthread_join(b, NULL);
    return level;
}
