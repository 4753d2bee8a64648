#include <math.h>
#include <stdio.h>
#include <string.h>

#include "lowsplat.h"

#define CHECK(call)                                                      \
    do {                                                                 \
        LsStatus st_ = (call);                                           \
        if (st_ != LS_STATUS_OK) {                                       \
            char msg_[256];                                              \
            ls_last_error(msg_, sizeof msg_);                            \
            fprintf(stderr, "%s -> %d: %s\n", #call, (int)st_, msg_);    \
            return 1;                                                    \
        }                                                                \
    } while (0)

int main(int argc, char **argv) {
    if (argc != 2) return 2;
    const char *scene_path = argv[1];
    LsScene *scene = NULL;
    CHECK(ls_scene_read(scene_path, &scene));
    if (ls_scene_len(scene) != 1) return 3;

    LsCamera cam = {32, 32, 16, 16, {1, 0, 0, 0, 1, 0, 0, 0, 1}, {0, 0, 0}, 32, 32};
    double bg[3] = {0.3, 0.3, 0.3};
    LsImage *img = NULL;
    CHECK(ls_render(scene, &cam, bg, &img));
    uint32_t w = 0, h = 0;
    CHECK(ls_image_size(img, &w, &h));
    if (w != 32 || h != 32) return 4;
    double px[32 * 32 * 3];
    CHECK(ls_image_pixels(img, px, sizeof px / sizeof px[0]));
    /* The primitive sits on the optical axis: the center is brighter than the corner. */
    double center = px[(16 * 32 + 16) * 3], corner = px[0];
    if (!(center > corner + 0.1) || fabs(corner - 0.3) > 1e-6) return 5;

    double psnr = 0, ssim = 0;
    CHECK(ls_image_metrics(img, img, &psnr, &ssim));
    if (psnr != 99.0 || ssim != 1.0) return 6;

    LsImage *dark = NULL;
    CHECK(ls_degrade(img, 7, "c-client", 0, &dark));

    LsScene *missing = (LsScene *)0x1;
    if (ls_scene_read("/definitely/not/here.lsc", &missing) != LS_STATUS_MISSING_INPUT) return 7;
    char msg[8];
    size_t n = ls_last_error(msg, sizeof msg);
    if (n <= sizeof msg || msg[sizeof msg - 1] != '\0') return 8;
    if (ls_render(NULL, &cam, bg, &img) != LS_STATUS_NULL_ARGUMENT) return 9;

    ls_image_free(dark);
    ls_image_free(img);
    ls_scene_free(scene);
    printf("ok %s\n", ls_version());
    return 0;
}
