// expect: no-race
#include <pthread.h>

int queue[4];
int head;
pthread_mutex_t m = PTHREAD_MUTEX_INITIALIZER;

void *producer(void *arg) {
    int i;
    i = 0;
    while (i < 4) {
        pthread_mutex_lock(&m);
        if (head < 4) {
            queue[head] = i;
            head = head + 1;
        }
        pthread_mutex_unlock(&m);
        i = i + 1;
    }
    return NULL;
}

void *consumer(void *arg) {
    int v;
    pthread_mutex_lock(&m);
    if (head > 0) {
        head = head - 1;
        v = queue[head];
    }
    pthread_mutex_unlock(&m);
    return NULL;
}

int main() {
    pthread_t p, c;
    pthread_create(&p, NULL, producer, NULL);
    pthread_create(&c, NULL, consumer, NULL);
    pthread_join(p, NULL);
    pthread_join(c, NULL);
    return 0;
}
