#include <stdio.h>
#include <stdlib.h>
#include "wavesplat.h"

/* Usage: smoke <checkpoint>. Prints "objects gaussians mean_red". */
int main(int argc, char **argv) {
  if (argc != 2) return 2;
  WsScene *scene = NULL;
  WsStatus st = ws_scene_load(argv[1], &scene);
  if (st != WS_STATUS_OK) {
    char msg[512];
    ws_last_error(msg, sizeof msg);
    fprintf(stderr, "load failed (%d): %s\n", (int)st, msg);
    return 1;
  }
  size_t objects = 0, gaussians = 0;
  ws_scene_object_count(scene, &objects);
  ws_scene_gaussian_count(scene, &gaussians);

  WsCamera cam = {32, 24, 30.0, 30.0, 16.0, 12.0, 0.1, 100.0};
  /* Camera at the origin looking along world +x, z up. */
  double c2w[16] = {0, 0, 1, 0, -1, 0, 0, 0, 0, -1, 0, 1.5, 0, 0, 0, 1};
  double *rgb = malloc(sizeof(double) * 32 * 24 * 3);
  double t0, t1;
  ws_scene_time_range(scene, &t0, &t1);
  st = ws_scene_render(scene, t0, c2w, &cam, NULL, rgb, NULL);
  if (st != WS_STATUS_OK) return 1;
  double red = 0;
  for (int i = 0; i < 32 * 24; i++) red += rgb[3 * i];
  printf("%zu %zu %.6f\n", objects, gaussians, red / (32 * 24));

  WsScene *missing = NULL;
  if (ws_scene_load("/no/such.ckpt", &missing) != WS_STATUS_IO || missing) return 1;
  ws_scene_free(scene);
  free(rgb);
  return 0;
}
