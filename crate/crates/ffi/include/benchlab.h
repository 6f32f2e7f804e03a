#ifndef BENCHLAB_H
#define BENCHLAB_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BenchlabStatus {
  BENCHLAB_STATUS_OK = 0,
  BENCHLAB_STATUS_NULL_POINTER = 1,
  BENCHLAB_STATUS_INVALID_UTF8 = 2,
  BENCHLAB_STATUS_INVALID_INPUT = 3,
  BENCHLAB_STATUS_INFERENCE_FAILED = 4,
  BENCHLAB_STATUS_BUFFER_TOO_SMALL = 5,
  BENCHLAB_STATUS_PANIC = 6,
} BenchlabStatus;

/**
 * Strengths and labeler profiles inferred for one master map.
 */
typedef struct BenchlabEmResult BenchlabEmResult;

/**
 * Merged master map of one image.
 */
typedef struct BenchlabMaster BenchlabMaster;

typedef struct BenchlabEmConfig {
  double sigma;
  size_t grid;
  double epsilon;
  size_t max_iters;
  double tol;
  /**
   * True uses the kernel-regression profile instead of the sigmoid fit.
   */
  bool raw_mu;
} BenchlabEmConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until the
 * next call into the library from the same thread.
 */
const char *benchlab_last_error(void);

struct BenchlabEmConfig benchlab_em_config_default(void);

/**
 * Parses a master-map JSON document.
 */
enum BenchlabStatus benchlab_master_from_json(const char *json, struct BenchlabMaster **out);

/**
 * Merges a labels JSON document; `tolerance` is a fraction of the image diagonal.
 */
enum BenchlabStatus benchlab_merge_labels(const char *labels_json,
                                          double tolerance,
                                          struct BenchlabMaster **out);

enum BenchlabStatus benchlab_master_pixel_count(const struct BenchlabMaster *master, size_t *out);

/**
 * Number of master pixels marked by exactly one labeler.
 */
enum BenchlabStatus benchlab_master_orphan_count(const struct BenchlabMaster *master, size_t *out);

/**
 * Master map as JSON; release with `benchlab_string_free`.
 */
enum BenchlabStatus benchlab_master_to_json(const struct BenchlabMaster *master, char **out);

void benchlab_master_free(struct BenchlabMaster *master);

/**
 * Runs EM; a NULL `config` uses the defaults.
 */
enum BenchlabStatus benchlab_run_em(const struct BenchlabMaster *master,
                                    const struct BenchlabEmConfig *config,
                                    struct BenchlabEmResult **out);

enum BenchlabStatus benchlab_em_result_iterations(const struct BenchlabEmResult *result,
                                                  size_t *out);

/**
 * Copies pixel ids and strengths in id order. `written` always receives the
 * full count; when it exceeds `capacity` nothing is copied and
 * `BUFFER_TOO_SMALL` is returned.
 */
enum BenchlabStatus benchlab_em_result_strengths(const struct BenchlabEmResult *result,
                                                 uint32_t *ids,
                                                 double *strengths,
                                                 size_t capacity,
                                                 size_t *written);

/**
 * Strengths file JSON; release with `benchlab_string_free`.
 */
enum BenchlabStatus benchlab_em_result_to_json(const struct BenchlabEmResult *result, char **out);

void benchlab_em_result_free(struct BenchlabEmResult *result);

void benchlab_string_free(char *s);

/**
 * Fraction of (s, a) pairs with a stronger than s, ties counting half.
 */
enum BenchlabStatus benchlab_true_strength_risk(const double *s,
                                                size_t s_len,
                                                const double *a,
                                                size_t a_len,
                                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BENCHLAB_H */
