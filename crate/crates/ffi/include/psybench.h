/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef PSYBENCH_H
#define PSYBENCH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PsyMappingKind {
  PSY_MAPPING_KIND_PROPORTION_SCALED = 0,
  PSY_MAPPING_KIND_PERCENTILE_PASSTHROUGH = 1,
  /*
   Logged as `unknown->percentile_clipped`.
   */
  PSY_MAPPING_KIND_UNKNOWN_PERCENTILE_CLIPPED = 2,
  PSY_MAPPING_KIND_UNPARSABLE = 3,
} PsyMappingKind;

/*
 Result code of every fallible call.
 */
typedef enum PsyStatus {
  PSY_STATUS_OK = 0,
  PSY_STATUS_NULL_POINTER = 1,
  PSY_STATUS_INVALID_UTF8 = 2,
  PSY_STATUS_INVALID_ARGUMENT = 3,
  /*
   No trait value could be read from the text.
   */
  PSY_STATUS_UNPARSABLE = 4,
  /*
   A trait value or index was outside its allowed range.
   */
  PSY_STATUS_OUT_OF_RANGE = 5,
  PSY_STATUS_PANIC = 6,
} PsyStatus;

/*
 Streaming near-duplicate filter (character 5-gram Jaccard).
 */
typedef struct PsyDedup PsyDedup;

/*
 Streaming metric accumulator.
 */
typedef struct PsyMetrics PsyMetrics;

/*
 Big Five values in percentile space, each in [0, 100].
 */
typedef struct PsyTraits {
  double o;
  double c;
  double e;
  double a;
  double n;
} PsyTraits;

typedef struct PsyMetricReport {
  double mae5;
  double rmse5;
  double profile_acc;
  /*
   NaN when no scored sample had a defined cosine.
   */
  double cosine;
  size_t n_scored;
  size_t n_omitted;
} PsyMetricReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread, or NULL. The pointer
 stays valid until the next library call on the same thread.
 */
const char *psy_last_error(void);

/*
 Parses a model's trait report and maps it into percentile space.
 `out_kind` may be NULL. On `PSY_STATUS_UNPARSABLE`, `*out_kind` (if given)
 is set to `PSY_MAPPING_KIND_UNPARSABLE` and `*out` is untouched.

 # Safety
 `text` must be a NUL-terminated string; `out` and `out_kind` must be
 valid for writes or NULL.
 */
enum PsyStatus psy_parse_prediction(const char *text,
                                    struct PsyTraits *out,
                                    enum PsyMappingKind *out_kind);

/*
 Mean absolute error over the five traits.

 # Safety
 All pointers must be valid; `p` and `t` for reads, `out` for a write.
 */
enum PsyStatus psy_mae5(const struct PsyTraits *p, const struct PsyTraits *t, double *out);

/*
 # Safety
 As for [`psy_mae5`].
 */
enum PsyStatus psy_rmse5(const struct PsyTraits *p, const struct PsyTraits *t, double *out);

/*
 `100 - MAE5`.

 # Safety
 As for [`psy_mae5`].
 */
enum PsyStatus psy_profile_acc(const struct PsyTraits *p, const struct PsyTraits *t, double *out);

/*
 Fails with `PSY_STATUS_INVALID_ARGUMENT` when either vector is all zeros.

 # Safety
 As for [`psy_mae5`].
 */
enum PsyStatus psy_cosine(const struct PsyTraits *p, const struct PsyTraits *t, double *out);

/*
 Number of points in the control grid.
 */
size_t psy_grid_len(void);

/*
 Writes grid point `index` to `out`. Points are in O, C, E, A, N
 lexicographic order, so N changes fastest.

 # Safety
 `out` must be valid for writes.
 */
enum PsyStatus psy_grid_get(size_t index, struct PsyTraits *out);

/*
 Preference loss from the four length-normalized log-likelihoods.

 # Safety
 `out` must be valid for writes.
 */
enum PsyStatus psy_dpo_loss(double theta_chosen,
                            double theta_rejected,
                            double ref_chosen,
                            double ref_rejected,
                            double beta,
                            double *out);

/*
 Supervised loss: `-ll` plus the weighted trait penalty. `weights` points
 to five floats in O, C, E, A, N order, or is NULL for equal weights.

 # Safety
 `scored` and `target` must be valid for reads, `weights` NULL or valid
 for five reads, `out` valid for writes.
 */
enum PsyStatus psy_sft_loss(double length_norm_ll,
                            const struct PsyTraits *scored,
                            const struct PsyTraits *target,
                            double eta,
                            const double *weights,
                            double *out);

/*
 Creates a dedup filter that drops texts whose similarity to an earlier
 kept text is strictly greater than `threshold`.

 # Safety
 `out` must be valid for writes.
 */
enum PsyStatus psy_dedup_new(double threshold, struct PsyDedup **out);

/*
 Offers one text. On keep, `*out_kept` is true and `*out_index` is the
 text's index among kept texts. On removal, `*out_kept` is false,
 `*out_index` is the matched kept text and `*out_similarity` its Jaccard.

 # Safety
 `handle` must come from [`psy_dedup_new`]; `text` must be NUL-terminated;
 out-pointers must be valid for writes.
 */
enum PsyStatus psy_dedup_offer(struct PsyDedup *handle,
                               const char *text,
                               bool *out_kept,
                               size_t *out_index,
                               double *out_similarity);

/*
 Number of texts kept so far; 0 for a NULL handle.

 # Safety
 `handle` must be NULL or come from [`psy_dedup_new`].
 */
size_t psy_dedup_kept(const struct PsyDedup *handle);

/*
 # Safety
 `handle` must be NULL or come from [`psy_dedup_new`], and not be used again.
 */
void psy_dedup_free(struct PsyDedup *handle);

struct PsyMetrics *psy_metrics_new(void);

/*
 Adds one sample. A NULL `prediction` counts as an omitted (unparsable)
 output.

 # Safety
 `handle` must come from [`psy_metrics_new`]; `prediction` NULL or valid;
 `target` valid.
 */
enum PsyStatus psy_metrics_push(struct PsyMetrics *handle,
                                const struct PsyTraits *prediction,
                                const struct PsyTraits *target);

/*
 Fails with `PSY_STATUS_INVALID_ARGUMENT` if nothing was scored.

 # Safety
 `handle` must come from [`psy_metrics_new`]; `out` valid for writes.
 */
enum PsyStatus psy_metrics_finish(const struct PsyMetrics *handle, struct PsyMetricReport *out);

/*
 # Safety
 `handle` must be NULL or come from [`psy_metrics_new`], and not be used again.
 */
void psy_metrics_free(struct PsyMetrics *handle);

/*
 Builds a persona prompt from a JSON request:
 `{"target":[o,c,e,a,n],"family":"role_play","is_index":0,"frame_index":0}`.
 `is_profile` and `frame` may replace the indices with inline records.
 The prompt text is written to `*out` and must be released with
 [`psy_string_free`].

 # Safety
 `request_json` must be NUL-terminated; `out` valid for writes.
 */
enum PsyStatus psy_build_prompt_json(const char *request_json, char **out);

/*
 # Safety
 `s` must be NULL or a string returned by this library, not freed before.
 */
void psy_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PSYBENCH_H */
