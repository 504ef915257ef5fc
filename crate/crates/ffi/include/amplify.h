#ifndef AMPLIFY_H
#define AMPLIFY_H

/* Generated by cbindgen from crates/ffi. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AmplifyStatus {
  AMPLIFY_STATUS_OK = 0,
  AMPLIFY_STATUS_NULL_POINTER = 1,
  AMPLIFY_STATUS_INVALID_UTF8 = 2,
  AMPLIFY_STATUS_INVALID_ARGUMENT = 3,
  AMPLIFY_STATUS_IO = 4,
  AMPLIFY_STATUS_MODEL = 5,
  AMPLIFY_STATUS_NOT_FOUND = 6,
  AMPLIFY_STATUS_PANIC = 7,
} AmplifyStatus;

/**
 * Loaded proxy model.
 */
typedef struct AmplifyModel AmplifyModel;

/**
 * Loaded task file.
 */
typedef struct AmplifyTask AmplifyTask;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until
 * the next call into this library from the same thread.
 */
const char *amplify_last_error(void);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void amplify_string_free(char *s);

/**
 * Loads a proxy model file written by `train-proxy`.
 *
 * # Safety
 * `path` must be a nul-terminated string, `out` a valid pointer.
 */
enum AmplifyStatus amplify_model_load(const char *path, struct AmplifyModel **out);

/**
 * # Safety
 * `model` must come from [`amplify_model_load`] or be NULL.
 */
void amplify_model_free(struct AmplifyModel *model);

/**
 * Number of labels, or 0 for NULL.
 *
 * # Safety
 * `model` must be a live handle or NULL.
 */
size_t amplify_model_num_labels(const struct AmplifyModel *model);

/**
 * Label name at `index`.
 *
 * # Safety
 * `model` must be a live handle, `out` a valid pointer.
 */
enum AmplifyStatus amplify_model_label(const struct AmplifyModel *model, size_t index, char **out);

/**
 * Writes class probabilities for `text` into `probs`, which must hold
 * exactly `amplify_model_num_labels` values.
 *
 * # Safety
 * `probs` must point to `len` writable doubles.
 */
enum AmplifyStatus amplify_model_predict_proba(const struct AmplifyModel *model,
                                               const char *text,
                                               double *probs,
                                               size_t len);

/**
 * Attributes `text` toward label `target` (negative: the predicted label)
 * and returns the result as JSON, with `top_words` cut to `k` entries
 * when `k > 0`. `method` is one of `grad`, `grad_x_input`,
 * `contrastive_grad`, `contrastive_grad_x_input`.
 *
 * # Safety
 * String arguments must be nul-terminated; `out` a valid pointer.
 */
enum AmplifyStatus amplify_model_explain(const struct AmplifyModel *model,
                                         const char *text,
                                         int64_t target,
                                         const char *method,
                                         size_t k,
                                         char **out);

/**
 * Loads a JSON Lines task file.
 *
 * # Safety
 * `path` must be nul-terminated, `out` a valid pointer.
 */
enum AmplifyStatus amplify_task_load(const char *path, struct AmplifyTask **out);

/**
 * # Safety
 * `task` must come from [`amplify_task_load`] or be NULL.
 */
void amplify_task_free(struct AmplifyTask *task);

/**
 * Number of examples, or 0 for NULL.
 *
 * # Safety
 * `task` must be a live handle or NULL.
 */
size_t amplify_task_num_examples(const struct AmplifyTask *task);

/**
 * Parses a completion for example `example_id` with the task's labels,
 * choices and answer delimiter. `out` is set to NULL when no label can
 * be extracted.
 *
 * # Safety
 * String arguments must be nul-terminated; `out` a valid pointer.
 */
enum AmplifyStatus amplify_task_parse_answer(const struct AmplifyTask *task,
                                             const char *example_id,
                                             const char *raw_text,
                                             char **out);

/**
 * Parses a completion against a bare label list. `out` is set to NULL
 * when no label can be extracted.
 *
 * # Safety
 * `labels` must point to `n_labels` nul-terminated strings.
 */
enum AmplifyStatus amplify_parse_answer(const char *raw_text,
                                        const char *const *labels,
                                        size_t n_labels,
                                        const char *delimiter,
                                        char **out);

/**
 * Renders the rationale sentence for `keywords` and `label` with a
 * built-in template (`standard` or `typical-person`).
 *
 * # Safety
 * `keywords` must point to `n_keywords` nul-terminated strings.
 */
enum AmplifyStatus amplify_render_rationale(const char *const *keywords,
                                            size_t n_keywords,
                                            const char *label,
                                            const char *template_,
                                            char **out);

/**
 * Response-cache key (64 hex chars) for a completion request.
 *
 * # Safety
 * `stop` must point to `n_stop` nul-terminated strings.
 */
enum AmplifyStatus amplify_cache_key(const char *model_name,
                                     const char *prompt,
                                     double temperature,
                                     uint32_t max_tokens,
                                     const char *const *stop,
                                     size_t n_stop,
                                     char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AMPLIFY_H */
