// expect: unknown
#include <pthread.h>

int flag;
int data;

void *consumer(void *arg) {
    int v;
    while (flag == 0) {
    }
    v = data;
    return NULL;
}

int main() {
    pthread_t t;
    pthread_create(&t, NULL, consumer, NULL);
    data = 3;
    flag = 1;
    pthread_join(t, NULL);
    return 0;
}
