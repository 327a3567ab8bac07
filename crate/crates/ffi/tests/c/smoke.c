#include <stdio.h>
#include <string.h>

#include "vit_surgeon.h"

int main(void) {
    VsModelInfo info = {4, 16, 2, 4, 8, 4};
    VsModel *model = NULL;
    if (vs_model_synthetic(info, 3, &model) != VS_STATUS_OK) {
        fprintf(stderr, "synthetic: %s\n", vs_last_error_message());
        return 1;
    }
    double entropy[4];
    if (vs_model_entropy_profile(model, entropy, 4) != VS_STATUS_OK) return 2;

    float emb[2 * 4] = {1, 0, 0, 0, 0, 1, 0, 0};
    VsTextBank *bank = NULL;
    if (vs_text_bank_new(emb, 2, 4, &bank) != VS_STATUS_OK) return 3;

    VsSegmentOptions opts;
    vs_segment_options_default(&opts);
    opts.mode = VS_MODE_CLEARCLIP;
    opts.cs_enabled = false;
    unsigned char rgb[12 * 10 * 3];
    for (size_t i = 0; i < sizeof rgb; i++) rgb[i] = (unsigned char)(i * 7);
    unsigned char mask[12 * 10];
    if (vs_segment_rgb(model, bank, rgb, 12, 10, &opts, mask) != VS_STATUS_OK) {
        fprintf(stderr, "segment: %s\n", vs_last_error_message());
        return 4;
    }
    for (size_t i = 0; i < sizeof mask; i++)
        if (mask[i] > 1) return 5;

    VsStatus st = vs_model_load("/nonexistent/dir", &model);
    if (st != VS_STATUS_DATA || strlen(vs_last_error_message()) == 0) return 6;

    vs_text_bank_free(bank);
    vs_model_free(model);
    printf("ok\n");
    return 0;
}
