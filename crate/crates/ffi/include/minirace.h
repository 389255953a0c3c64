#ifndef MINIRACE_H
#define MINIRACE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MrMachine {
  MR_MACHINE_LP64 = 0,
  MR_MACHINE_ILP32 = 1,
} MrMachine;

typedef enum MrMode {
  MR_MODE_COMBINED = 0,
  MR_MODE_UNDER = 1,
  MR_MODE_OVER = 2,
} MrMode;

typedef enum MrStatus {
  MR_STATUS_OK = 0,
  MR_STATUS_NULL_ARGUMENT = 1,
  MR_STATUS_INVALID_UTF8 = 2,
  /**
   * Syntax error or unsupported feature; see `mr_last_error`.
   */
  MR_STATUS_FRONTEND = 3,
  MR_STATUS_INVALID_ARGUMENT = 4,
  MR_STATUS_INTERNAL = 5,
} MrStatus;

typedef enum MrVerdict {
  MR_VERDICT_NO_RACE = 0,
  MR_VERDICT_RACE = 1,
  MR_VERDICT_UNKNOWN = 2,
} MrVerdict;

/**
 * Parsed program.
 */
typedef struct MrProgram MrProgram;

/**
 * Analyzer result for one program.
 */
typedef struct MrReport MrReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until
 * the next call into this library from the same thread.
 */
const char *mr_last_error(void);

/**
 * Library version, static.
 */
const char *mr_version(void);

/**
 * Parse C source text. `file_name` is used in diagnostics and reports.
 *
 * # Safety
 * `source` and `file_name` must be NUL-terminated strings; `out` must be
 * a valid pointer.
 */
enum MrStatus mr_program_parse(const char *source,
                               const char *file_name,
                               enum MrMachine machine,
                               struct MrProgram **out);

/**
 * # Safety
 * `program` must come from `mr_program_parse` and not be freed twice.
 */
void mr_program_free(struct MrProgram *program);

/**
 * Analyze a program. `call_depth` bounds call-string length (2 is the
 * usual choice).
 *
 * # Safety
 * `program` must be a live handle; `out` must be a valid pointer.
 */
enum MrStatus mr_analyze(const struct MrProgram *program,
                         enum MrMode mode,
                         uint32_t call_depth,
                         struct MrReport **out);

/**
 * Run the bounded interleaving oracle. A result of `Unknown` means the
 * bounds were exceeded.
 *
 * # Safety
 * `program` must be a live handle; `out` must be a valid pointer.
 */
enum MrStatus mr_oracle(const struct MrProgram *program,
                        uint32_t loops,
                        uint32_t threads,
                        uint64_t states,
                        enum MrVerdict *out);

/**
 * # Safety
 * `report` must be a live handle.
 */
enum MrVerdict mr_report_verdict(const struct MrReport *report);

/**
 * Number of reported race pairs.
 *
 * # Safety
 * `report` must be a live handle.
 */
size_t mr_report_race_count(const struct MrReport *report);

/**
 * Number of must-level race pairs.
 *
 * # Safety
 * `report` must be a live handle.
 */
size_t mr_report_must_count(const struct MrReport *report);

/**
 * Why the verdict is unknown, or null. Owned by the report.
 *
 * # Safety
 * `report` must be a live handle.
 */
const char *mr_report_unsupported(const struct MrReport *report);

/**
 * Serialize the report as JSON. Free the string with `mr_string_free`.
 *
 * # Safety
 * `report` must be a live handle; `out` must be a valid pointer.
 */
enum MrStatus mr_report_json(const struct MrReport *report, char **out);

/**
 * # Safety
 * `report` must come from `mr_analyze` and not be freed twice.
 */
void mr_report_free(struct MrReport *report);

/**
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void mr_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MINIRACE_H */
