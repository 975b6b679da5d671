#ifndef LAPSIM_H
#define LAPSIM_H

/* C interface to the anastomosis simulator. All functions return a status;
 * on failure lapsim_last_error() holds a message for the calling thread.
 * Strings returned through char** are heap copies; release them with
 * lapsim_string_free. Handles are opaque and not thread safe. */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(LAPSIM_BUILDING)
#define LAPSIM_API __attribute__((visibility("default")))
#else
#define LAPSIM_API
#endif

/* Values match the library's internal error codes. */
typedef enum lapsim_status {
  LAPSIM_OK = 0,
  LAPSIM_E_INVALID_ARGUMENT = 1,
  LAPSIM_E_WRONG_MARKER_COUNT,
  LAPSIM_E_AMBIGUOUS_ORDERING,
  LAPSIM_E_MARKER_OUT_OF_VIEW,
  LAPSIM_E_TISSUE_MOVING,
  LAPSIM_E_SHAPE_MISMATCH,
  LAPSIM_E_DOMAIN_ERROR,
  LAPSIM_E_NON_FINITE_GRADIENT,
  LAPSIM_E_WINDOW_TOO_SHORT,
  LAPSIM_E_MISSING_GROUND_TRUTH,
  LAPSIM_E_NON_POSITIVE_VELOCITY,
  LAPSIM_E_NON_POSITIVE_PERIOD,
  LAPSIM_E_DEGENERATE_GEOMETRY,
  LAPSIM_E_MARKERS_MISSING,
  LAPSIM_E_MARKER_SET_MISMATCH,
  LAPSIM_E_INSERTION_TOO_DEEP,
  LAPSIM_E_PIVOT_LIMIT_EXCEEDED,
  LAPSIM_E_BITE_MISSED_TISSUE,
  LAPSIM_E_RCM_VIOLATION,
  LAPSIM_E_STITCH_IN_FLIGHT,
  LAPSIM_E_INVALID_COMMAND_FOR_STATE,
  LAPSIM_E_POLICY_STUCK,
  LAPSIM_E_DATASET_TOO_SMALL,
  LAPSIM_E_CARDINALITY_MISMATCH,
  LAPSIM_E_TOO_FEW_STITCHES,
  LAPSIM_E_EDGE_UNAVAILABLE,
  LAPSIM_E_EMPTY_SAMPLE,
  LAPSIM_E_INCOMPLETE_LOG,
  LAPSIM_E_INVALID_SCENARIO,
  LAPSIM_E_UNKNOWN_SESSION,
  LAPSIM_E_SCHEMA_VERSION_MISMATCH,
  LAPSIM_E_CORRUPT_LOG,
  LAPSIM_E_MISSING_WEIGHTS,
  LAPSIM_E_IO,
  LAPSIM_E_TOOL_FAILURE,
  LAPSIM_E_FEWER_PEAKS_THAN_REQUESTED,
  LAPSIM_E_INTERNAL = 100
} lapsim_status;

LAPSIM_API const char* lapsim_version(void);
LAPSIM_API const char* lapsim_status_name(lapsim_status status);
LAPSIM_API const char* lapsim_last_error(void);
LAPSIM_API void lapsim_string_free(char* s);

/* ---- scenarios ---------------------------------------------------------- */

/* Validates a scenario file; *normalized receives it re-serialized.
 * Errors carry line diagnostics. */
LAPSIM_API lapsim_status lapsim_scenario_check(const char* path, char** normalized);

/* ---- run logs ----------------------------------------------------------- */

typedef struct lapsim_log lapsim_log;

LAPSIM_API lapsim_status lapsim_log_load(const char* path, lapsim_log** out);
LAPSIM_API lapsim_status lapsim_log_parse(const char* jsonl, lapsim_log** out);
LAPSIM_API void lapsim_log_destroy(lapsim_log* log);
LAPSIM_API lapsim_status lapsim_log_save(const lapsim_log* log, const char* path);
LAPSIM_API lapsim_status lapsim_log_jsonl(const lapsim_log* log, char** out);
/* State named by the end record, or the last state record of an open log. */
LAPSIM_API lapsim_status lapsim_log_final_state(const lapsim_log* log, char** out);
/* Re-drives the recorded commands; *out is the reconstructed log. */
LAPSIM_API lapsim_status lapsim_log_replay(const lapsim_log* log, lapsim_log** out);
/* Metrics report as JSON. reference_path may be NULL. */
LAPSIM_API lapsim_status lapsim_log_report(const lapsim_log* log, const char* reference_path, char** report_json);
/* Writes report.json, spacing.csv and bite_depth.csv into dir. */
LAPSIM_API lapsim_status lapsim_log_write_report(const lapsim_log* log, const char* dir, const char* reference_path);

/* ---- scripted runs ------------------------------------------------------ */

/* Runs a scenario (NULL path: built-in standard scenario) under a named
 * policy (AutoApprove, CornerPreferring, Corrective). On LAPSIM_E_POLICY_STUCK
 * *out still receives the partial log. */
LAPSIM_API lapsim_status lapsim_run(const char* scenario_path, const char* profile, uint64_t seed, const char* policy,
                                    lapsim_log** out);

/* ---- interactive sessions ----------------------------------------------- */

typedef struct lapsim_session lapsim_session;

/* Headless session on the simulated clock, left in Idle. */
LAPSIM_API lapsim_status lapsim_session_create(const char* scenario_path, const char* profile, uint64_t seed,
                                               lapsim_session** out);
LAPSIM_API void lapsim_session_destroy(lapsim_session* s);
/* Applies a command JSON ({"type": ..., "id": ..., "mode"/"offset"}) at the
 * current simulated time and runs until the next operator decision.
 * *accepted is 0 when the state does not take the command. */
LAPSIM_API lapsim_status lapsim_session_submit(lapsim_session* s, const char* command_json, int* accepted);
/* {"state", "t", "wall", "stitches", ...} */
LAPSIM_API lapsim_status lapsim_session_info(const lapsim_session* s, char** info_json);
LAPSIM_API lapsim_status lapsim_session_log(const lapsim_session* s, lapsim_log** out);

/* ---- motion benchmark --------------------------------------------------- */

/* Trains the motion CNN and saves it. config_json may be NULL or hold
 * {"recordings", "epochs", "seed"}. *stats_json: loss per epoch, accuracy. */
LAPSIM_API lapsim_status lapsim_motion_train(const char* config_json, const char* weights_path, char** stats_json);
/* Distance x orientation x cycle grid. config_json may be NULL or hold
 * {"distances_mm", "orientations", "cycles", "seed"}. Needs the CNN weights
 * file (LAPSIM_E_MISSING_WEIGHTS otherwise). */
LAPSIM_API lapsim_status lapsim_motion_bench(const char* config_json, const char* weights_path, char** summary_json,
                                             char** csv);

/* ---- landmarks ---------------------------------------------------------- */

/* Writes a synthetic labelled dataset. options_json may be NULL or hold
 * {"frames", "seed"}. */
LAPSIM_API lapsim_status lapsim_landmark_generate(const char* data_dir, const char* options_json);
/* Trains on the odd serials of data_dir and saves weights into weights_dir;
 * *result_json also holds the evaluation on the even serials. */
LAPSIM_API lapsim_status lapsim_landmark_train(const char* data_dir, const char* weights_dir, const char* options_json,
                                               char** result_json);
LAPSIM_API lapsim_status lapsim_landmark_eval(const char* data_dir, const char* weights_dir, char** result_json);

/* ---- service ------------------------------------------------------------ */

typedef struct lapsim_server lapsim_server;

/* config_json may be NULL (environment defaults) or hold
 * {"bind", "port", "log_dir", "scenario", "snapshot_hz", "realtime_scale"}. */
LAPSIM_API lapsim_status lapsim_server_create(const char* config_json, lapsim_server** out);
LAPSIM_API lapsim_status lapsim_server_bind(lapsim_server* srv, int* port);
/* Blocks until lapsim_server_stop is called from another thread. */
LAPSIM_API lapsim_status lapsim_server_run(lapsim_server* srv);
LAPSIM_API void lapsim_server_stop(lapsim_server* srv);
LAPSIM_API void lapsim_server_destroy(lapsim_server* srv);

#ifdef __cplusplus
}
#endif

#endif /* LAPSIM_H */
