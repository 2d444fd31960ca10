#ifndef PIO_H_
#define PIO_H_

/* C interface to the Perceiver IO library. All functions that can fail take a
 * char** errptr: on failure it is set to a malloc'd message (free with
 * pio_free) and the function returns NULL / nonzero. Strings returned by value
 * are malloc'd and owned by the caller. */

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef struct pio_model_t pio_model_t;

/* Experiment runner. config_json is a full experiment configuration document.
 * out_dir overrides the configured output directory when non-NULL; seed
 * overrides when >= 0. Returns the run summary as a JSON string. */
extern char* pio_run_experiment(const char* config_json, const char* out_dir, long long seed,
                                char** errptr);

/* Matched attention vs average+project decoder comparison on a toy-classify
 * configuration. Returns the paired metrics as JSON. */
extern char* pio_compare_decoders(const char* config_json, const char* out_dir, long long seed,
                                  char** errptr);

/* Architecture cost reports. Exactly one of preset / spec_json must be
 * non-NULL. as_text selects the human-readable table instead of JSON. */
extern char* pio_flops_report(const char* preset, const char* spec_json, int as_text, char** errptr);

/* Comma-separated preset names. */
extern char* pio_flops_presets(void);

/* Reverse-mode vs central-difference battery; returns results as JSON and
 * sets *all_passed when the pointer is non-NULL. */
extern char* pio_gradcheck(int* all_passed, char** errptr);

/* Model handles. model_json holds the "model" section of the experiment
 * configuration plus a required nonzero input_channels. */
extern pio_model_t* pio_model_create(const char* model_json, unsigned long long seed, char** errptr);
extern void pio_model_destroy(pio_model_t* model);
extern long long pio_model_parameter_count(const pio_model_t* model);
extern long long pio_model_output_channels(const pio_model_t* model);

/* Runs inputs [m x c] and queries [o x eq] through encode-process-decode and
 * writes the [o x output_channels] result to out (capacity out_len doubles).
 * Returns 0 on success. */
extern int pio_model_forward(pio_model_t* model, const double* inputs, size_t m, size_t c,
                             const double* queries, size_t o, size_t eq, double* out, size_t out_len,
                             char** errptr);

/* Checkpoint round trip (PRCV container, bit-exact in f64 mode). */
extern int pio_model_save(pio_model_t* model, const char* path, char** errptr);
extern int pio_model_load(pio_model_t* model, const char* path, char** errptr);

extern void pio_free(void* ptr);
extern int pio_version_major(void);
extern int pio_version_minor(void);

#ifdef __cplusplus
} /* end extern "C" */
#endif

#endif /* PIO_H_ */
