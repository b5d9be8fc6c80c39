#include <stdio.h>
#include <string.h>
#include "poelic.h"

int main(void) {
    PoelicCodec *codec = NULL;
    if (poelic_codec_new_random(0, 1, &codec) != POELIC_STATUS_OK) return 1;
    enum { W = 20, H = 12 };
    uint8_t px[3 * W * H];
    for (size_t i = 0; i < sizeof px; i++) px[i] = (uint8_t)(i * 7);
    PoelicBuffer stream = {0}, out = {0};
    size_t w = 0, h = 0;
    if (poelic_compress_rgb8(codec, px, W, H, &stream) != POELIC_STATUS_OK) return 2;
    if (poelic_decompress_rgb8(codec, stream.data, stream.len, &out, &w, &h) != POELIC_STATUS_OK) return 3;
    if (w != W || h != H || out.len != sizeof px) return 4;
    stream.data[0] ^= 0xff;
    PoelicBuffer bad = {0};
    if (poelic_decompress_rgb8(codec, stream.data, stream.len, &bad, &w, &h) != POELIC_STATUS_BITSTREAM) return 5;
    if (poelic_last_error_message() == NULL) return 6;
    printf("%zu bytes\n", stream.len);
    poelic_buffer_free(&stream);
    poelic_buffer_free(&out);
    poelic_codec_free(codec);
    return 0;
}
