#ifndef PVTN_H
#define PVTN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Deterministic keyed-hash provider, used for golden traces.
 */
#define PVTN_PROVIDER_MOCK 0

/**
 * Ed25519, X25519 and ChaCha20-Poly1305.
 */
#define PVTN_PROVIDER_REAL 1

typedef enum PvtnStatus {
  PVTN_STATUS_OK = 0,
  PVTN_STATUS_NULL_ARGUMENT = 1,
  PVTN_STATUS_INVALID_UTF8 = 2,
  PVTN_STATUS_PARSE = 3,
  PVTN_STATUS_SETUP = 4,
  /**
   * The run finished but an expectation or invariant failed.
   */
  PVTN_STATUS_FAILED = 5,
  /**
   * Chain verification or isolation check rejected the input.
   */
  PVTN_STATUS_REJECTED = 6,
  PVTN_STATUS_PANIC = 7,
  PVTN_STATUS_INVALID_ARGUMENT = 8,
} PvtnStatus;

/**
 * A finished run: trace, final tree and assertion results.
 */
typedef struct PvtnRun PvtnRun;

/**
 * A parsed scenario.
 */
typedef struct PvtnScenario PvtnScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message on this thread, or null. The caller frees it.
 */
char *pvtn_last_error(void);

/**
 * # Safety
 * `s` is null or was returned by this library and not yet freed.
 */
void pvtn_string_free(char *s);

/**
 * Parses scenario TOML into `*out`.
 *
 * # Safety
 * `toml` is a NUL-terminated string; `out` is writable.
 */
enum PvtnStatus pvtn_scenario_parse(const char *toml, struct PvtnScenario **out);

/**
 * # Safety
 * `sc` is null or came from [`pvtn_scenario_parse`] and is not yet freed.
 */
void pvtn_scenario_free(struct PvtnScenario *sc);

/**
 * Runs a scenario to quiescence. A non-zero `seed` overrides the file's.
 * The run is stored in `*out` whenever it executed, even when it returns
 * [`PvtnStatus::Failed`].
 *
 * # Safety
 * `sc` is a live scenario handle; `out` is writable.
 */
enum PvtnStatus pvtn_scenario_run(const struct PvtnScenario *sc,
                                  uint32_t provider_kind,
                                  uint64_t seed,
                                  struct PvtnRun **out);

/**
 * 1 if every expectation and invariant held, 0 otherwise or for null.
 *
 * # Safety
 * `run` is null or a live run handle.
 */
int32_t pvtn_run_passed(const struct PvtnRun *run);

/**
 * Rendered trace, snapshot and results, as written to golden files.
 *
 * # Safety
 * `run` is null or a live run handle.
 */
char *pvtn_run_render(const struct PvtnRun *run);

/**
 * Final tree snapshot in the line format `pvtn dump-tree` reads.
 *
 * # Safety
 * `run` is null or a live run handle.
 */
char *pvtn_run_snapshot(const struct PvtnRun *run);

/**
 * # Safety
 * `run` is null or came from [`pvtn_scenario_run`] and is not yet freed.
 */
void pvtn_run_free(struct PvtnRun *run);

/**
 * Verifies hex certificates (one per line, root side first) against a hex
 * anchor key at tick `at`. Returns [`PvtnStatus::Rejected`] for a chain
 * that parses but does not verify.
 *
 * # Safety
 * `certs` and `anchor` are NUL-terminated strings.
 */
enum PvtnStatus pvtn_verify_chain(const char *certs,
                                  const char *anchor,
                                  uint64_t at,
                                  uint32_t provider_kind);

/**
 * Checks a snapshot for keys or edges crossing tenants. The number of
 * violations goes to `*violations` when it is non-null.
 *
 * # Safety
 * `snapshot` is a NUL-terminated string; `violations` is null or writable.
 */
enum PvtnStatus pvtn_isolation_check(const char *snapshot, uintptr_t *violations);

/**
 * Library version, static.
 */
const char *pvtn_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PVTN_H */
