#ifndef NSD_H
#define NSD_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NsdStatus {
  NSD_STATUS_OK = 0,
  NSD_STATUS_NULL_POINTER = 1,
  NSD_STATUS_INVALID_ARGUMENT = 2,
  NSD_STATUS_IO = 3,
  NSD_STATUS_PARSE = 4,
  NSD_STATUS_CONFIG = 5,
  NSD_STATUS_DATA = 6,
  NSD_STATUS_MODEL = 7,
  NSD_STATUS_SHAPE = 8,
  NSD_STATUS_PANIC = 9,
} NsdStatus;

typedef struct NsdDetector NsdDetector;

typedef struct NsdModel NsdModel;

/**
 * IPv4 uses the first four octets; `family` is 4 or 6.
 */
typedef struct NsdIp {
  uint8_t family;
  uint8_t octets[16];
} NsdIp;

/**
 * `protocol`: 6 TCP, 17 UDP, anything else is treated as port-less.
 * Ports are ignored for port-less protocols.
 */
typedef struct NsdPacket {
  uint64_t timestamp_us;
  struct NsdIp src;
  struct NsdIp dst;
  uint32_t size_bytes;
  uint8_t protocol;
  uint16_t src_port;
  uint16_t dst_port;
} NsdPacket;

/**
 * One classified conversation at one step. L1 codes: 0 CG, 1 RT, 2 NRT.
 * Sub-class codes: 0 MG, 1 VC, 2 AC, 3 FD, 4 VS, -1 none. Multi-label
 * flags are in the order CG, RT, NRT.
 */
typedef struct NsdPrediction {
  uint64_t step;
  struct NsdIp local;
  struct NsdIp remote;
  int8_t raw_l1;
  int8_t raw_l2;
  int8_t voted_l1;
  int8_t voted_l2;
  int8_t fused_l1;
  int8_t fused_l2;
  double l1_probs[3];
  bool multi_label[3];
  bool multi_label_final[3];
} NsdPrediction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *nsd_version(void);

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *nsd_last_error_message(void);

/**
 * Loads a model file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NsdStatus nsd_model_load(const char *path, struct NsdModel **out);

/**
 * # Safety
 * `model` must come from [`nsd_model_load`] or be NULL.
 */
size_t nsd_model_n_classes(const struct NsdModel *model);

/**
 * # Safety
 * `model` must come from [`nsd_model_load`] or be NULL.
 */
size_t nsd_model_feature_count(const struct NsdModel *model);

/**
 * Writes `n_classes` probabilities to `out`.
 *
 * # Safety
 * `x` must point to `x_len` doubles and `out` to `out_len` doubles.
 */
enum NsdStatus nsd_model_predict_proba(const struct NsdModel *model,
                                       const double *x,
                                       size_t x_len,
                                       double *out,
                                       size_t out_len);

/**
 * # Safety
 * `model` must come from [`nsd_model_load`] or be NULL, and not be used
 * afterwards.
 */
void nsd_model_free(struct NsdModel *model);

/**
 * Creates a streaming detector from a bundle manifest and an optional
 * pipeline configuration file (NULL for defaults).
 *
 * # Safety
 * Strings must be NUL-terminated; `out` must be valid.
 */
enum NsdStatus nsd_detector_new(const char *bundle_path,
                                const char *config_path,
                                struct NsdDetector **out);

/**
 * Feeds one packet. Packets must arrive in timestamp order; completed
 * steps queue predictions for [`nsd_detector_poll`].
 *
 * # Safety
 * `det` and `packet` must be valid.
 */
enum NsdStatus nsd_detector_push_packet(struct NsdDetector *det, const struct NsdPacket *packet);

/**
 * Sensor hints for a future or current step.
 *
 * # Safety
 * `det` must be valid.
 */
enum NsdStatus nsd_detector_set_sensors(struct NsdDetector *det,
                                        uint64_t step,
                                        bool gaming_flag,
                                        bool camera_active);

/**
 * Closes the open step, e.g. at end of stream.
 *
 * # Safety
 * `det` must be valid.
 */
enum NsdStatus nsd_detector_flush(struct NsdDetector *det);

/**
 * Pops the oldest queued prediction into `out`. `*available` is set to
 * false when the queue is empty.
 *
 * # Safety
 * All pointers must be valid.
 */
enum NsdStatus nsd_detector_poll(struct NsdDetector *det,
                                 struct NsdPrediction *out,
                                 bool *available);

/**
 * # Safety
 * `det` must come from [`nsd_detector_new`] or be NULL, and not be used
 * afterwards.
 */
void nsd_detector_free(struct NsdDetector *det);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NSD_H */
