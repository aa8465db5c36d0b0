"""CSV and JSON writers shared by the library and the batch front door.

CSV numbers carry 17 significant digits ('.' decimal separator, newline
terminated records) so 64-bit floats round-trip losslessly; JSON is dumped
with sorted keys so identical runs produce byte-identical documents.
"""

from __future__ import annotations

import json

import numpy as np

__all__ = ["fmt", "write_csv", "write_json", "field_summary_rows",
           "field_full_rows", "trace_rows", "stability_rows", "ladder_rows"]


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) if not isinstance(v, str) else v
                              for v in row) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    return obj


def write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, sort_keys=True, indent=2)
        fh.write("\n")


def field_summary_rows(field):
    """time, mean|y|, std|y|, mean|z| per grid time."""
    abs_y = np.linalg.norm(field.y_values, axis=2)
    abs_z = np.linalg.norm(field.z_values.reshape(field.z_values.shape[0],
                                                  field.z_values.shape[1], -1), axis=2)
    for i, t in enumerate(field.grid.times):
        yield (t, abs_y[i].mean(), abs_y[i].std(), abs_z[i].mean())


def field_full_rows(field):
    """time, path, y components, z components (row-major)."""
    n1, m, k = field.y_values.shape
    d = field.z_values.shape[3]
    for i in range(n1):
        t = field.grid.times[i]
        for j in range(m):
            yield (t, j, *field.y_values[i, j], *field.z_values[i, j].reshape(k * d))


def trace_rows(trace, with_seconds: bool = True):
    for r in trace.rows:
        row = (r["subinterval"], r["iteration"], r["sup_mean_abs_dy"],
               r["s_half_dy"], r["m_half_dz"])
        yield row + (r["seconds"],) if with_seconds else row


def stability_rows(report):
    for name in sorted(report.metrics):
        for m, v, se in zip(report.indices, report.metrics[name],
                            report.standard_errors[name]):
            yield (m, name, v, se)


def ladder_rows(diag):
    for j, dist in enumerate(diag.distances):
        lo, hi = diag.levels[j], diag.levels[j + 1]
        for key in ("sup_mean_abs_dy", "s_half_dy", "m_half_dz"):
            yield (lo, hi, key, dist[key], dist[key + "_se"])
