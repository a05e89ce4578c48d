#ifndef CT_HARNESS_H
#define CT_HARNESS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CtStatus {
  CT_STATUS_OK = 0,
  CT_STATUS_NULL_POINTER = 1,
  CT_STATUS_INVALID_UTF8 = 2,
  CT_STATUS_INVALID_ARGUMENT = 3,
  CT_STATUS_SINGLE_CLASS = 4,
  CT_STATUS_NON_FINITE = 5,
  CT_STATUS_TOO_FEW_VALUES = 6,
  CT_STATUS_PROMPT = 7,
  CT_STATUS_PANIC = 99,
} CtStatus;

typedef enum CtTask {
  CT_TASK_ZERO_SHOT_BINARY = 0,
  CT_TASK_ZERO_SHOT_PROBABILISTIC = 1,
  CT_TASK_FEW_SHOT_BINARY = 2,
} CtTask;

typedef enum CtParseStatus {
  CT_PARSE_STATUS_CLEAN = 0,
  CT_PARSE_STATUS_RECOVERED = 1,
  CT_PARSE_STATUS_FAILED = 2,
} CtParseStatus;

typedef enum CtObjective {
  CT_OBJECTIVE_F1_POSITIVE = 0,
  CT_OBJECTIVE_MACRO_F1 = 1,
  CT_OBJECTIVE_YOUDEN = 2,
} CtObjective;

typedef enum CtTestMethod {
  CT_TEST_METHOD_MCNEMAR_EXACT = 0,
  CT_TEST_METHOD_MCNEMAR_CHI2 = 1,
  CT_TEST_METHOD_WELCH_T = 2,
  CT_TEST_METHOD_PAIRED_T = 3,
} CtTestMethod;

typedef enum CtDefinition {
  CT_DEFINITION_CUSTOM = 0,
  CT_DEFINITION_LOREM_IPSUM = 1,
  CT_DEFINITION_NONE = 2,
} CtDefinition;

typedef enum CtDialect {
  CT_DIALECT_GPT = 0,
  CT_DIALECT_LLAMA = 1,
} CtDialect;

/**
 * Opaque collection of (score, label) pairs for threshold calibration.
 */
typedef struct CtScoreSet CtScoreSet;

/**
 * Parsed model output. `label` is 1 (positive), 0 (negative) or -1 when
 * the verdict is a score or missing; `score` is NaN unless the verdict is
 * a score.
 */
typedef struct CtVerdict {
  enum CtParseStatus status;
  bool has_verdict;
  int32_t label;
  double score;
} CtVerdict;

typedef struct CtConfusion {
  uint64_t tp;
  uint64_t fp;
  uint64_t fn_;
  uint64_t tn;
} CtConfusion;

typedef struct CtMetrics {
  double precision_0;
  double recall_0;
  double f1_0;
  double precision_1;
  double recall_1;
  double f1_1;
  double macro_f1;
  double accuracy;
  /**
   * Number of metrics whose denominator was zero (reported as 0).
   */
  uint32_t n_degenerate;
} CtMetrics;

typedef struct CtThreshold {
  double threshold;
  double objective_value;
  double f1_at_threshold;
} CtThreshold;

typedef struct CtTestResult {
  enum CtTestMethod method;
  double statistic;
  double p_value;
  /**
   * NaN for McNemar.
   */
  double df;
  bool significant;
  bool degenerate;
} CtTestResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread; empty after a
 * successful call. Valid until the next call into this library.
 */
const char *ct_last_error(void);

/**
 * Library version, static storage.
 */
const char *ct_version(void);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void ct_string_free(char *s);

/**
 * Parses a raw model output with the parser for `task`.
 *
 * # Safety
 * `raw` must be a NUL-terminated string; `out` must be writable.
 */
enum CtStatus ct_parse_output(enum CtTask task, const char *raw, struct CtVerdict *out);

/**
 * Confusion counts for aligned 0/1 label arrays of length `n`.
 *
 * # Safety
 * `gold` and `pred` must point to `n` readable bytes; `out` must be writable.
 */
enum CtStatus ct_confusion(const uint8_t *gold,
                           const uint8_t *pred,
                           size_t n,
                           struct CtConfusion *out);

/**
 * Per-class precision/recall/F1, macro F1 and accuracy.
 *
 * # Safety
 * `confusion` must be readable and `out` writable.
 */
enum CtStatus ct_metrics(const struct CtConfusion *confusion, struct CtMetrics *out);

struct CtScoreSet *ct_score_set_new(void);

/**
 * # Safety
 * `set` must come from [`ct_score_set_new`] and not have been freed.
 */
enum CtStatus ct_score_set_push(struct CtScoreSet *set, double score, uint8_t label);

/**
 * # Safety
 * `set` must be NULL or a live handle.
 */
size_t ct_score_set_len(const struct CtScoreSet *set);

/**
 * Threshold maximising `objective` over the pushed pairs.
 *
 * # Safety
 * `set` must be a live handle and `out` writable.
 */
enum CtStatus ct_score_set_optimize(const struct CtScoreSet *set,
                                    enum CtObjective objective,
                                    struct CtThreshold *out);

/**
 * # Safety
 * `set` must be NULL or a handle from [`ct_score_set_new`], freed once.
 */
void ct_score_set_free(struct CtScoreSet *set);

/**
 * McNemar's test from the discordant counts: `b` items only model A got
 * right, `c` items only model B got right.
 *
 * # Safety
 * `out` must be writable.
 */
enum CtStatus ct_mcnemar(uint64_t b, uint64_t c, double alpha, struct CtTestResult *out);

/**
 * Welch's unequal-variance t test, two-sided.
 *
 * # Safety
 * `a` and `b` must point to `na` and `nb` doubles; `out` must be writable.
 */
enum CtStatus ct_welch_t(const double *a,
                         size_t na,
                         const double *b,
                         size_t nb,
                         double alpha,
                         struct CtTestResult *out);

/**
 * Renders a zero-shot prompt for `text`. On success `*system` and `*user`
 * receive owned strings.
 *
 * # Safety
 * `text` must be NUL-terminated; `system` and `user` must be writable.
 */
enum CtStatus ct_prompt_render(enum CtTask task,
                               enum CtDefinition definition,
                               enum CtDialect dialect,
                               const char *text,
                               char **system,
                               char **user);

/**
 * Hex SHA-256 digest identifying a rendered prompt; NULL on failure.
 *
 * # Safety
 * `system` and `user` must be NUL-terminated.
 */
char *ct_prompt_digest(const char *system, const char *user);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CT_HARNESS_H */
