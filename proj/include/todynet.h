/*
 * todynet — dynamic-graph neural network for multivariate time series
 * classification. C89-compatible shared-library interface: opaque handles,
 * integer status codes, thread-local error text.
 *
 * Handles are not thread-safe; confine each handle to one thread.
 */

#ifndef TODYNET_H
#define TODYNET_H

#include <stdint.h>

#if defined(_WIN32)
#define TODY_API __declspec(dllexport)
#else
#define TODY_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum tody_status {
    TODY_OK = 0,
    TODY_ERR_IO = 1,      /* file missing/unreadable/unwritable */
    TODY_ERR_PARSE = 2,   /* malformed dataset text */
    TODY_ERR_CONFIG = 3,  /* invalid configuration or argument ranges */
    TODY_ERR_DATA = 4,    /* valid input that violates a data contract */
    TODY_ERR_RUNTIME = 5, /* numeric failure (non-finite loss, ...) */
} tody_status;

typedef enum tody_precision {
    TODY_PRECISION_F32 = 0,
    TODY_PRECISION_F64 = 1,
} tody_precision;

typedef struct tody_dataset tody_dataset;
typedef struct tody_model tody_model;
typedef struct tody_report tody_report;

/* Training/model configuration. Zero-initialize then call
 * tody_config_defaults(), or fill every field. */
typedef struct tody_config {
    int32_t num_graphs;     /* time slots S */
    int32_t top_k;          /* retained edges per row */
    double pool_ratio;      /* (0, 1] */
    int32_t tc_kernels[3];  /* odd */
    int32_t tc_channels[3];
    int32_t batch_size;
    double learning_rate;
    int32_t epochs;
    uint64_t seed;
    int32_t precision; /* tody_precision */
    int32_t no_graph;
    int32_t no_dygraph;
    int32_t no_gpool;
    int32_t znormalize; /* per-series per-dimension z-normalization */
} tody_config;

TODY_API const char* tody_version(void);

/* Message for the most recent failing call on this thread. */
TODY_API const char* tody_last_error(void);

TODY_API void tody_config_defaults(tody_config* cfg);

/* ------------------------------------------------------------------ */
/* datasets                                                            */

TODY_API tody_status tody_dataset_load(const char* path, int32_t apply_znormalize,
                                       tody_dataset** out);
TODY_API void tody_dataset_free(tody_dataset* ds);

TODY_API int32_t tody_dataset_num_series(const tody_dataset* ds);
TODY_API int32_t tody_dataset_dimensions(const tody_dataset* ds);
TODY_API int32_t tody_dataset_series_length(const tody_dataset* ds);
TODY_API int32_t tody_dataset_num_classes(const tody_dataset* ds);
TODY_API const char* tody_dataset_problem_name(const tody_dataset* ds);
/* NULL when index is out of range. */
TODY_API const char* tody_dataset_class_label(const tody_dataset* ds, int32_t index);
/* FNV-1a 64 digest of the source file bytes. */
TODY_API uint64_t tody_dataset_digest(const tody_dataset* ds);

/* ------------------------------------------------------------------ */
/* training and evaluation                                             */

typedef void (*tody_epoch_callback)(int32_t epoch, double loss, void* user);

/* Trains a fresh model on `train`. Either output pointer may be NULL when
 * the caller does not need that object. */
TODY_API tody_status tody_train(const tody_dataset* train, const tody_config* cfg,
                                tody_epoch_callback cb, void* user, tody_model** out_model,
                                tody_report** out_report);

TODY_API void tody_model_free(tody_model* model);
TODY_API void tody_report_free(tody_report* report);

TODY_API int32_t tody_report_num_epochs(const tody_report* report);
TODY_API double tody_report_epoch_loss(const tody_report* report, int32_t epoch);
TODY_API double tody_report_train_accuracy(const tody_report* report);
TODY_API double tody_report_wall_seconds(const tody_report* report);
TODY_API int32_t tody_report_best_epoch(const tody_report* report);

/* Argmax accuracy on `ds` (ties resolve to the smaller class index). */
TODY_API tody_status tody_evaluate(tody_model* model, const tody_dataset* ds,
                                   double* out_accuracy);

/* ------------------------------------------------------------------ */
/* checkpoints and inspection                                          */

TODY_API tody_status tody_model_save(tody_model* model, const char* path);
TODY_API tody_status tody_model_load(const char* path, tody_model** out);

TODY_API tody_status tody_model_config(const tody_model* model, tody_config* out);
TODY_API int32_t tody_model_num_layers(const tody_model* model);
TODY_API int32_t tody_model_num_slots(const tody_model* model);
TODY_API int32_t tody_model_num_classes(const tody_model* model);
TODY_API const char* tody_model_dataset_name(const tody_model* model);

/* Tab-separated edge list (header line prefixed '#') of the sparsified,
 * normalized adjacency for 1-based `layer` and `slot`. Free the string with
 * tody_string_free. */
TODY_API tody_status tody_model_edge_list(tody_model* model, int32_t layer, int32_t slot,
                                          char** out_text);
TODY_API void tody_string_free(char* text);

#ifdef __cplusplus
}
#endif

#endif /* TODYNET_H */
