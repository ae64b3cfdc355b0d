"""On-disk formats: MetaImage volumes, case manifests and CSV reports."""

from .manifest import CaseData, CaseManifest, LandmarkPair, load_case_data, load_manifest, write_manifest
from .metaimage import read_mhd, write_mhd
from .reports import RunReport, RunRow, collect_runs, write_report

__all__ = [
    "CaseData",
    "CaseManifest",
    "LandmarkPair",
    "RunReport",
    "RunRow",
    "collect_runs",
    "load_case_data",
    "load_manifest",
    "read_mhd",
    "write_manifest",
    "write_mhd",
    "write_report",
]
