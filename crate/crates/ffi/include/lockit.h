#ifndef LOCKIT_H
#define LOCKIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum LockitStatus {
  LOCKIT_STATUS_OK = 0,
  /**
   * Null pointer, invalid UTF-8 or an out-of-range index.
   */
  LOCKIT_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Rejected settings.
   */
  LOCKIT_STATUS_CONFIG = 2,
  /**
   * Missing, unreadable or inconsistent input data.
   */
  LOCKIT_STATUS_DATA = 3,
  /**
   * Failure while computing.
   */
  LOCKIT_STATUS_RUNTIME = 4,
  /**
   * Internal panic; the handle involved should be freed.
   */
  LOCKIT_STATUS_PANIC = 5,
} LockitStatus;

/**
 * A streaming localizer over one map.
 */
typedef struct LockitLocalizer LockitLocalizer;

/**
 * A topological map.
 */
typedef struct LockitMap LockitMap;

typedef struct LockitPose {
  double x;
  double y;
  double theta;
} LockitPose;

/**
 * Motion in the frame of the previous scan.
 */
typedef struct LockitOdometry {
  double dx;
  double dy;
  double dtheta;
} LockitOdometry;

/**
 * Outcome of pushing one scan.
 */
typedef struct LockitStep {
  /**
   * False when the scan was skipped because too little distance was travelled.
   */
  bool processed;
  size_t iteration;
  struct LockitPose coarse;
  double effective_sample_size;
  /**
   * False when the localizer runs without a fine stage.
   */
  bool has_fine;
  struct LockitPose fine;
  /**
   * The fine stage failed and `fine` repeats the coarse pose.
   */
  bool fine_fell_back;
} LockitStep;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *lockit_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *lockit_last_error_message(void);

/**
 * Loads a map directory written by `lockit build-map` or `lockit_map_save`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LockitStatus lockit_map_load(const char *dir, struct LockitMap **out);

/**
 * Builds a map from a trajectory directory or pose CSV with the synthetic
 * descriptor backend and default preprocessing.
 *
 * # Safety
 * `trajectory` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LockitStatus lockit_map_build(const char *trajectory,
                                   double spacing_m,
                                   struct LockitMap **out);

/**
 * # Safety
 * `map` must come from this library and `dir` be a NUL-terminated string.
 */
enum LockitStatus lockit_map_save(const struct LockitMap *map, const char *dir);

/**
 * Number of nodes; 0 for a null handle.
 *
 * # Safety
 * `map` must be null or come from this library.
 */
size_t lockit_map_node_count(const struct LockitMap *map);

/**
 * # Safety
 * `map` must come from this library and `out` be a valid pointer.
 */
enum LockitStatus lockit_map_node_pose(const struct LockitMap *map,
                                       size_t index,
                                       struct LockitPose *out);

/**
 * # Safety
 * `map` must be null or come from this library and not be used afterwards.
 * Localizers created from the map stay valid.
 */
void lockit_map_free(struct LockitMap *map);

/**
 * Creates a localizer. `config_json` holds a localization config document
 * (null for defaults). `features_dir` selects precomputed LDSC descriptors;
 * null uses the synthetic backend.
 *
 * # Safety
 * `map` must come from this library, the strings must be null or
 * NUL-terminated, and `out` must be a valid pointer.
 */
enum LockitStatus lockit_localizer_new(const struct LockitMap *map,
                                       const char *config_json,
                                       const char *features_dir,
                                       struct LockitLocalizer **out);

/**
 * Pushes one scan of `n_points` xyz triples (sensor frame, metres).
 * `odometry` is the motion since the previous pushed scan and is ignored for
 * the first one; null means no motion. `scan_id` names the scan for
 * file-backed descriptors and may be null otherwise.
 *
 * # Safety
 * `localizer` must come from this library; `xyz` must point to `3 * n_points`
 * doubles; `scan_id` must be null or NUL-terminated; `out` must be valid.
 */
enum LockitStatus lockit_localizer_push(struct LockitLocalizer *localizer,
                                        const char *scan_id,
                                        const double *xyz,
                                        size_t n_points,
                                        const struct LockitOdometry *odometry,
                                        struct LockitStep *out);

/**
 * Processed filter iterations so far; 0 for a null handle.
 *
 * # Safety
 * `localizer` must be null or come from this library.
 */
size_t lockit_localizer_iterations(const struct LockitLocalizer *localizer);

/**
 * Writes the run files (trace, poses, particles, registrations, summary) into `dir`.
 *
 * # Safety
 * `localizer` must come from this library and `dir` be NUL-terminated.
 */
enum LockitStatus lockit_localizer_write(const struct LockitLocalizer *localizer, const char *dir);

/**
 * # Safety
 * `localizer` must be null or come from this library and not be used afterwards.
 */
void lockit_localizer_free(struct LockitLocalizer *localizer);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LOCKIT_H */
