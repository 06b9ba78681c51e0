/* C interface to the flowiar library.
 *
 * Every function returns a status code; on failure fi_last_error() holds a
 * human-readable message for the calling thread. Handles are opaque and must
 * be released with their matching free function. Strings returned through
 * out-parameters are heap-allocated and released with fi_string_free().
 */
#ifndef FLOWIAR_C_H
#define FLOWIAR_C_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum {
    FI_OK = 0,
    /* bad spec, bad arguments, capacity guards */
    FI_ERR_VALIDATION = 2,
    /* runtime failure (starvation, numerics, I/O) */
    FI_ERR_RUNTIME = 3
} fi_status;

/* Message for the most recent failure on this thread; empty string if none. */
const char* fi_last_error(void);

void fi_string_free(char* s);

/* ---- experiment specs ---- */

typedef struct fi_spec fi_spec;

/* Loads a JSON spec file, applies dotted-path overrides ("train.lr=0.001"),
 * and validates. */
fi_status fi_spec_load(const char* path, const char* const* overrides,
                       int n_overrides, fi_spec** out);

/* Parse + validate only; no handle is produced. */
fi_status fi_spec_validate(const char* path, const char* const* overrides,
                           int n_overrides);

void fi_spec_free(fi_spec* spec);

/* Canonical JSON form of the spec. */
fi_status fi_spec_to_json(const fi_spec* spec, char** out_json);

/* ---- training ---- */

/* Runs one training run per seed. out_json receives a summary with the run
 * directories, final and best returns, and abort diagnostics per seed. */
fi_status fi_train(const fi_spec* spec, char** out_json);

/* ---- evaluation ---- */

/* Evaluates a checkpoint on the spec's environment: mean/std return over
 * n_episodes plus a 200-sample action histogram at a probe state. */
fi_status fi_evaluate(const fi_spec* spec, const char* checkpoint_path,
                      int64_t n_episodes, uint64_t eval_seed, char** out_json);

/* ---- plotting ---- */

/* groups_json: [{"label": "...", "run_dirs": ["...", ...]}, ...]
 * x_axis: "env_steps" or "wall_clock_s". Writes out_prefix.svg and
 * out_prefix.csv. */
fi_status fi_plot(const char* groups_json, const char* x_axis, const char* metric,
                  const char* out_prefix);

/* ---- ablations ---- */

/* name: "gradient_correction", "sandwich", or "posterior_type". Runs both
 * arms of the pair and writes overlay plots and a report under the base
 * spec's output directory. out_json receives the report. */
fi_status fi_ablate(const char* name, const fi_spec* base, char** out_json);

#ifdef __cplusplus
}
#endif

#endif
