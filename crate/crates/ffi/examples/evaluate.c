/* cc -I crates/ffi/include crates/ffi/examples/evaluate.c target/release/libsaunet_ffi.a -lm -lpthread -ldl */
#include <stdio.h>
#include "saunet.h"

int main(void) {
    size_t shape[3] = {4, 4, 4};
    uint8_t pred[64] = {0}, truth[64] = {0};
    truth[21] = 1;
    pred[21] = 1;
    pred[42] = 1; /* touches truth only at a cube corner */

    for (uint8_t conn = 6; conn <= 26; conn += 20) {
        SaunetMetrics m;
        SaunetStatus s = saunet_evaluate(pred, truth, shape, conn, &m);
        if (s != SAUNET_STATUS_OK) {
            fprintf(stderr, "error %d: %s\n", s, saunet_last_error());
            return 1;
        }
        printf("%2u-connectivity: DICE %.3f AVD %.3f F1 %.3f\n", conn, m.dice, m.avd, m.f1);
    }
    return 0;
}
