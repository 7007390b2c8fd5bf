#include <math.h>
#include <stdio.h>
#include <string.h>

#include "hers.h"

#define CHECK(cond)                                                   \
  do {                                                                \
    if (!(cond)) {                                                    \
      fprintf(stderr, "failed: %s (%s)\n", #cond, hers_last_error()); \
      return 1;                                                       \
    }                                                                 \
  } while (0)

int main(void) {
  double r = 0.0;
  CHECK(hers_rouge_l("rear bumper dent", "front bumper dent", &r) == HERS_STATUS_OK);
  CHECK(fabs(r - 2.0 / 3.0) < 1e-15);
  CHECK(hers_rouge_l(NULL, "x", &r) == HERS_STATUS_NULL_POINTER);
  CHECK(strstr(hers_last_error(), "`a` is null") != NULL);

  double emb[HERS_EMBED_DIM];
  CHECK(hers_embed_prompt("A dent on the hood", emb, HERS_EMBED_DIM) == HERS_STATUS_OK);
  double norm = 0.0;
  for (int i = 0; i < HERS_EMBED_DIM; i++) norm += emb[i] * emb[i];
  CHECK(fabs(norm - 1.0) < 1e-12);

  double zero = 0.0, one = 1.0;
  HersGaussian *p = NULL, *q = NULL;
  CHECK(hers_gaussian_new(&zero, &one, 1, &p) == HERS_STATUS_OK);
  CHECK(hers_gaussian_new(&one, &one, 1, &q) == HERS_STATUS_OK);
  double d = 0.0;
  CHECK(hers_fid(p, q, &d) == HERS_STATUS_OK && fabs(d - 1.0) < 1e-12);
  CHECK(hers_kl_gaussian(p, q, &d) == HERS_STATUS_OK && fabs(d - 0.5) < 1e-12);
  hers_gaussian_free(p);
  hers_gaussian_free(q);

  printf("hers %s ok\n", hers_version());
  return 0;
}
