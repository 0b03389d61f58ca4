"""Evaluation outputs: JSONL record streams and CSV tables.

Records are one JSON object per line with sorted keys and no extra
whitespace; floats serialize via Python's shortest repr, which round-trips
exactly, so load-then-save is byte-identical. Nothing here emits
timestamps: identical runs must produce identical report files.

CSV tables are for spreadsheet import; cells are written with ``str``,
which for floats is again the shortest repr. ``load_table`` returns string
cells, and rewriting them reproduces the file byte for byte.
"""

from __future__ import annotations

import csv
import json
from typing import Sequence

from .verification import TransferMatrix, VerificationReport

__all__ = [
    "write_records",
    "load_records",
    "write_table",
    "load_table",
    "verification_records",
    "verification_table",
    "quality_record",
    "quality_table",
    "region_similarity_records",
    "region_similarity_table",
    "transfer_records",
    "transfer_table",
    "render_transfer",
]


def write_records(path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def load_records(path) -> list[dict]:
    out: list[dict] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from None
    return out


def write_table(path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    """CSV with a header row; missing cells become empty strings."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(c)) for c in columns])


def _cell(value) -> str:
    if value is None:
        return ""
    return str(value)


def load_table(path) -> tuple[list[str], list[dict]]:
    """Returns (columns, rows) with string-valued cells."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            columns = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty table") from None
        rows = [dict(zip(columns, row)) for row in reader]
    return columns, rows


# ---------------------------------------------------------------------------
# record/table builders for the concrete report kinds

def verification_records(report: VerificationReport) -> list[dict]:
    """One record per FAR level."""
    out = []
    for p in report.points:
        out.append({
            "record": "verification",
            "dataset": report.dataset,
            "protocol": report.protocol,
            "f_database": report.f_database,
            "f_loss": report.f_loss,
            "f_target": report.f_target,
            "far": p.far,
            "threshold": p.threshold,
            "tar": p.tar,
            "n_genuine": report.n_genuine,
            "n_impostor": report.n_impostor,
            "skipped_identities": report.skipped_identities,
        })
    return out


_VERIFICATION_COLUMNS = ["dataset", "protocol", "f_database", "f_loss", "f_target",
                         "far", "threshold", "tar", "n_genuine", "n_impostor",
                         "skipped_identities"]


def verification_table(path, reports: Sequence[VerificationReport]) -> None:
    rows = [rec for rep in reports for rec in verification_records(rep)]
    write_table(path, _VERIFICATION_COLUMNS, rows)


def quality_record(dataset: str, f_database: str, means: dict, n_images: int) -> dict:
    rec = {"record": "image_quality", "dataset": dataset,
           "f_database": f_database, "n_images": n_images}
    rec.update(means)
    return rec


def quality_table(path, records: Sequence[dict]) -> None:
    metric_cols = sorted({k for r in records
                          for k in r if k not in ("record", "dataset",
                                                  "f_database", "n_images")})
    write_table(path, ["dataset", "f_database", *metric_cols, "n_images"], records)


def region_similarity_records(dataset: str, region_means: dict[str, float],
                              n_images: int) -> list[dict]:
    return [{"record": "region_similarity", "dataset": dataset, "region": region,
             "cosine": value, "n_images": n_images}
            for region, value in region_means.items()]


def region_similarity_table(path, records: Sequence[dict]) -> None:
    write_table(path, ["dataset", "region", "cosine", "n_images"], records)


def transfer_records(tm: TransferMatrix) -> list[dict]:
    out = []
    for i, (dataset, f_db) in enumerate(tm.row_labels):
        for j, target in enumerate(tm.col_labels):
            out.append({
                "record": "transfer",
                "dataset": dataset,
                "f_database": f_db,
                "f_target": target,
                "far": tm.far,
                "protocol": tm.protocol,
                "tar": float(tm.values[i, j]),
            })
    return out


def transfer_table(path, tm: TransferMatrix) -> None:
    write_table(path, ["dataset", "f_database", "f_target", "far", "protocol", "tar"],
                transfer_records(tm))


def render_transfer(tm: TransferMatrix) -> str:
    """Human-readable TAR grid, rows = (dataset, leaked system)."""
    row_names = [f"{d}/{f}" for d, f in tm.row_labels]
    left = max([len(n) for n in row_names] + [len("database")])
    width = max([len(c) for c in tm.col_labels] + [8])
    lines = [f"TAR at FAR={tm.far:g} ({tm.protocol})"]
    header = "database".ljust(left) + "  " + "  ".join(c.rjust(width) for c in tm.col_labels)
    lines.append(header)
    lines.append("-" * len(header))
    for name, row in zip(row_names, tm.values):
        cells = "  ".join(f"{v:.4f}".rjust(width) for v in row)
        lines.append(name.ljust(left) + "  " + cells)
    return "\n".join(lines) + "\n"
