#include <stdio.h>
#include "sqbox.h"

int main(void) {
    double points[400];
    for (int i = 0; i < 400; i++) {
        points[i] = (double)((i * 7919) % 101) / 10.0;
    }
    SqboxBox *box = NULL;
    SqboxStatus st = sqbox_box_fit(points, 200, 2, 50, 0.1, SQBOX_STRATEGY_STRICT, 0.0, &box);
    if (st != SQBOX_STATUS_OK) {
        char msg[256];
        sqbox_last_error(msg, sizeof msg);
        fprintf(stderr, "%s: %s\n", sqbox_status_message(st), msg);
        return 1;
    }
    double lo[2], hi[2];
    sqbox_box_bounds(box, lo, hi, 2);
    printf("box [%g, %g] x [%g, %g]\n", lo[0], hi[0], lo[1], hi[1]);
    sqbox_box_free(box);
    return 0;
}
