#ifndef RELTRACE_H
#define RELTRACE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define RT_OK 0

#define RT_ERR_NULL 1

#define RT_ERR_CONFIG 2

#define RT_ERR_DATA 3

#define RT_ERR_INVARIANT 4

/**
 * Opaque trace handle for one forward pass.
 */
typedef struct RtTrace RtTrace;

/**
 * Opaque model-weights handle.
 */
typedef struct RtWeights RtWeights;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent error on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *rt_last_error(void);

/**
 * Loads model weights from a container file into a new handle.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
int rt_weights_load(const char *path, struct RtWeights **out);

/**
 * Releases a weights handle. Passing NULL is a no-op.
 *
 * # Safety
 * `w` must be a pointer returned by `rt_weights_load` (or NULL), and must
 * not be used afterwards.
 */
void rt_weights_free(struct RtWeights *w);

/**
 * Number of residual-stream dimensions for the loaded model.
 *
 * # Safety
 * `w` must be a valid weights handle.
 */
size_t rt_d_model(const struct RtWeights *w);

/**
 * Runs an instrumented forward pass over `tokens[0..n]`.
 *
 * # Safety
 * `w` must be a valid weights handle, `tokens` must point to `n` ids, and
 * `out` must be a valid pointer.
 */
int rt_forward(const struct RtWeights *w, const uint32_t *tokens, size_t n, struct RtTrace **out);

/**
 * Releases a trace handle. Passing NULL is a no-op.
 *
 * # Safety
 * `t` must be a pointer returned by `rt_forward` (or NULL), and must not
 * be used afterwards.
 */
void rt_trace_free(struct RtTrace *t);

/**
 * Copies the final-position-independent logits row for position `pos`
 * into `out[0..len]`; `len` must equal the vocabulary size.
 *
 * # Safety
 * `t` must be a valid trace handle and `out` must point to `len` doubles.
 */
int rt_trace_logits(const struct RtTrace *t, size_t pos, double *out, size_t len);

/**
 * Writes the per-head attention contribution `Δ_att,h(t)` into
 * `out[0..len]`; `len` must equal d_model.
 *
 * # Safety
 * `w` and `t` must be valid handles and `out` must point to `len` doubles.
 */
int rt_head_contribution(const struct RtWeights *w,
                         const struct RtTrace *t,
                         size_t layer,
                         size_t head,
                         size_t target,
                         double *out,
                         size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RELTRACE_H */
