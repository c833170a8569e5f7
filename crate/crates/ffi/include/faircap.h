#ifndef FAIRCAP_H
#define FAIRCAP_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FaircapStatus {
  FAIRCAP_STATUS_OK = 0,
  FAIRCAP_STATUS_NULL_POINTER = 1,
  FAIRCAP_STATUS_INVALID_UTF8 = 2,
  FAIRCAP_STATUS_CONFIG = 3,
  FAIRCAP_STATUS_DATA = 4,
  FAIRCAP_STATUS_TRANSPORT = 5,
  FAIRCAP_STATUS_FAILURE_CAP = 6,
  FAIRCAP_STATUS_OUT_OF_RANGE = 7,
  FAIRCAP_STATUS_PANIC = 99,
} FaircapStatus;

/**
 * Opaque cohort handle.
 */
typedef struct FaircapCohort FaircapCohort;

/**
 * Opaque case repository handle.
 */
typedef struct FaircapRepository FaircapRepository;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next faircap call on the same thread.
 */
const char *faircap_last_error(void);

/**
 * # Safety
 * `s` must come from a faircap function and must not be freed twice.
 */
void faircap_string_free(char *s);

/**
 * Generates a synthetic cohort. `bias` may be null or a list such as
 * `male=0.5,black=0.3`.
 *
 * # Safety
 * `bias` must be null or a NUL-terminated string; `out` must be writable.
 */
enum FaircapStatus faircap_cohort_synth(uintptr_t n,
                                        uint64_t seed,
                                        const char *bias,
                                        struct FaircapCohort **out);

/**
 * Loads and validates a cohort CSV; invalid rows are dropped.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum FaircapStatus faircap_cohort_load_csv(const char *path, struct FaircapCohort **out);

/**
 * # Safety
 * `cohort` must be a live handle or null.
 */
uintptr_t faircap_cohort_len(const struct FaircapCohort *cohort);

/**
 * Writes the cohort as CSV text into `*out`.
 *
 * # Safety
 * `cohort` must be a live handle; `out` must be writable.
 */
enum FaircapStatus faircap_cohort_to_csv(const struct FaircapCohort *cohort, char **out);

/**
 * # Safety
 * `cohort` must come from a faircap constructor and must not be freed twice.
 */
void faircap_cohort_free(struct FaircapCohort *cohort);

/**
 * # Safety
 * `scores` and `labels` must each hold `n` elements; `out` must be writable.
 */
enum FaircapStatus faircap_auroc(const double *scores,
                                 const uint8_t *labels,
                                 uintptr_t n,
                                 double *out);

/**
 * # Safety
 * As for [`faircap_auroc`].
 */
enum FaircapStatus faircap_auprc(const double *scores,
                                 const uint8_t *labels,
                                 uintptr_t n,
                                 double *out);

/**
 * # Safety
 * As for [`faircap_auroc`].
 */
enum FaircapStatus faircap_brier(const double *scores,
                                 const uint8_t *labels,
                                 uintptr_t n,
                                 double *out);

/**
 * Equal opportunity difference between the rows with `group[i] != 0` and
 * the rest, at `threshold`.
 *
 * # Safety
 * `scores`, `labels` and `group` must each hold `n` elements; `out` must be
 * writable.
 */
enum FaircapStatus faircap_eod(const double *scores,
                               const uint8_t *labels,
                               const uint8_t *group,
                               uintptr_t n,
                               double threshold,
                               double *out);

/**
 * Loads a case repository file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum FaircapStatus faircap_repository_load(const char *path, struct FaircapRepository **out);

/**
 * # Safety
 * `repo` must be a live handle or null.
 */
uintptr_t faircap_repository_len(const struct FaircapRepository *repo);

/**
 * # Safety
 * `repo` must come from [`faircap_repository_load`] and must not be freed twice.
 */
void faircap_repository_free(struct FaircapRepository *repo);

/**
 * Retrieves the analog case for patient `index` of `cohort` with the default
 * retrieval settings. When no case qualifies, `*case_id` is set to null and
 * the status is still `Ok`.
 *
 * # Safety
 * Handles must be live; `case_id` and `similarity` must be writable.
 */
enum FaircapStatus faircap_retrieve(const struct FaircapRepository *repo,
                                    const struct FaircapCohort *cohort,
                                    uintptr_t index,
                                    char **case_id,
                                    double *similarity);

/**
 * Parses a raw model response into a prediction record serialized as JSON.
 *
 * # Safety
 * `raw` and `strategy` must be NUL-terminated strings; `out` must be writable.
 */
enum FaircapStatus faircap_parse_response(const char *raw, const char *strategy, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FAIRCAP_H */
