/* C interface to the test-time normalization harness. */

#ifndef MIXNORM_H
#define MIXNORM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define MIXNORM_OK 0

#define MIXNORM_ERR_USAGE 2

#define MIXNORM_ERR_NUMERIC 3

/**
 * Opaque: a (possibly trained) network checkpoint.
 */
typedef struct MixnormModel MixnormModel;

/**
 * Opaque: one adaptation run's scores and prediction trace.
 */
typedef struct MixnormRunResult MixnormRunResult;

/**
 * Opaque: an ordered evaluation stream.
 */
typedef struct MixnormStream MixnormStream;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent error on this thread. Borrowed; valid until
 * the next failing call on the same thread.
 */
const char *mixnorm_last_error(void);

/**
 * Load a model checkpoint from a plain-text file.
 */
int32_t mixnorm_model_load(const char *path, struct MixnormModel **out);

/**
 * Save a model checkpoint; round-trips bit-exactly.
 */
int32_t mixnorm_model_save(const struct MixnormModel *model, const char *path);

void mixnorm_model_free(struct MixnormModel *model);

/**
 * Build an evaluation stream over the pinned procedural evaluation dataset.
 * `descriptor` is `single:<kind>:<severity>`, `mixed:<severity>`, or
 * `clean`.
 */
int32_t mixnorm_stream_build(const char *descriptor, uint64_t seed, struct MixnormStream **out);

/**
 * Load a stream pinned to a file by `stream export` tooling.
 */
int32_t mixnorm_stream_load(const char *path, struct MixnormStream **out);

/**
 * Number of samples in the stream; 0 for a null handle.
 */
size_t mixnorm_stream_len(const struct MixnormStream *stream);

void mixnorm_stream_free(struct MixnormStream *stream);

/**
 * Run one adaptation method (`source_only`, `online_bn`, `tent`,
 * `mixnorm`, `mixnorm_fixed_affine`, `mixnormbn`, or `variant:<name>`)
 * over the stream, online, with the method's shipping hyperparameters.
 */
int32_t mixnorm_run(const struct MixnormModel *model,
                    const char *method,
                    const struct MixnormStream *stream,
                    size_t batch_size,
                    uint64_t seed,
                    struct MixnormRunResult **out);

/**
 * Overall error rate in [0,1]; NaN for a null handle.
 */
double mixnorm_result_error_rate(const struct MixnormRunResult *result);

size_t mixnorm_result_n_samples(const struct MixnormRunResult *result);

/**
 * Predicted class for one stream position, or -1 if out of range.
 */
int32_t mixnorm_result_prediction(const struct MixnormRunResult *result, size_t index);

/**
 * Error rate restricted to one corruption kind (or "clean"); NaN if the
 * kind is absent from the stream.
 */
double mixnorm_result_kind_error_rate(const struct MixnormRunResult *result, const char *kind);

void mixnorm_result_free(struct MixnormRunResult *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MIXNORM_H */
