"""Case manifests: which mask, image and landmark files make up a registration case."""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from ..errors import ManifestError
from ..metrics import LandmarkSet
from ..volume import Volume, VolumeKind
from .metaimage import read_mhd

logger = logging.getLogger(__name__)


class LandmarkPair(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    moving: Path
    fixed: Path


class CaseManifest(BaseModel):
    """One case; relative paths are resolved against the manifest's directory."""

    model_config = ConfigDict(extra="forbid")

    case_id: str
    moving_mask: Path
    fixed_mask: Path
    moving_image: Optional[Path] = None
    fixed_image: Optional[Path] = None
    landmarks: List[LandmarkPair] = []

    @field_validator("case_id")
    @classmethod
    def _case_id_is_path_safe(cls, value: str) -> str:
        if not value or "/" in value or "\\" in value or value in (".", ".."):
            raise ValueError(f"case_id '{value}' cannot be used as a directory name")
        return value

    @field_validator("landmarks")
    @classmethod
    def _unique_landmark_ids(cls, value: List[LandmarkPair]) -> List[LandmarkPair]:
        ids = [lm.id for lm in value]
        duplicates = sorted({i for i in ids if ids.count(i) > 1})
        if duplicates:
            raise ValueError(f"duplicate landmark ids: {duplicates}")
        return value

    def _paths(self) -> List[Path]:
        paths = [self.moving_mask, self.fixed_mask]
        paths += [p for p in (self.moving_image, self.fixed_image) if p is not None]
        for lm in self.landmarks:
            paths += [lm.moving, lm.fixed]
        return paths

    def resolved(self, base_dir: Path) -> "CaseManifest":
        """Copy with every relative path anchored at ``base_dir``."""

        def anchor(p: Optional[Path]) -> Optional[Path]:
            return None if p is None or p.is_absolute() else base_dir / p

        update: Dict[str, Any] = {}
        for name in ("moving_mask", "fixed_mask", "moving_image", "fixed_image"):
            new = anchor(getattr(self, name))
            if new is not None:
                update[name] = new
        update["landmarks"] = [
            lm.model_copy(update={"moving": anchor(lm.moving) or lm.moving, "fixed": anchor(lm.fixed) or lm.fixed})
            for lm in self.landmarks
        ]
        return self.model_copy(update=update)

    def missing_files(self) -> List[Path]:
        return [p for p in self._paths() if not p.exists()]


@dataclass
class CaseData:
    """Volumes of a case loaded from disk."""

    case_id: str
    moving_mask: Volume
    fixed_mask: Volume
    moving_image: Optional[Volume] = None
    fixed_image: Optional[Volume] = None
    moving_landmarks: Optional[LandmarkSet] = None
    fixed_landmarks: Optional[LandmarkSet] = None


def _parse_cases(data: Any, source: Path) -> List[CaseManifest]:
    entries = data["cases"] if isinstance(data, dict) and "cases" in data else [data]
    if not isinstance(entries, list) or not entries:
        raise ManifestError(f"{source}: manifest lists no cases")
    try:
        cases = [CaseManifest.model_validate(entry) for entry in entries]
    except ValidationError as e:
        raise ManifestError(f"{source}: invalid manifest: {e.errors()[0]['msg']}") from e
    ids = [c.case_id for c in cases]
    if len(set(ids)) != len(ids):
        raise ManifestError(f"{source}: duplicate case ids")
    return cases


def load_manifest(path: Union[str, Path], check_files: bool = True) -> List[CaseManifest]:
    """Read a single-case or ``{"cases": [...]}`` JSON manifest."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: not valid JSON ({e})") from e

    cases = [case.resolved(path.parent) for case in _parse_cases(data, path)]
    if check_files:
        for case in cases:
            missing = case.missing_files()
            if missing:
                raise ManifestError(f"case {case.case_id}: missing files {[str(p) for p in missing]}")
    logger.info("Loaded %d case(s) from %s", len(cases), path)
    return cases


def write_manifest(cases: Sequence[CaseManifest], path: Union[str, Path]) -> None:
    """Write cases as a ``{"cases": [...]}`` manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"cases": [case.model_dump(mode="json", exclude_none=True) for case in cases]}
    path.write_text(json.dumps(payload, indent=2) + "\n")


def _read_mask(path: Path) -> Volume:
    mask = read_mhd(path, kind=VolumeKind.BINARY_MASK)
    if not isinstance(mask, Volume):
        raise ManifestError(f"{path}: expected a single-channel mask")
    return mask


def load_case_data(case: CaseManifest) -> CaseData:
    """Read every volume a manifest references."""
    data = CaseData(
        case_id=case.case_id,
        moving_mask=_read_mask(case.moving_mask),
        fixed_mask=_read_mask(case.fixed_mask),
        moving_image=None if case.moving_image is None else read_mhd(case.moving_image, VolumeKind.INTENSITY),
        fixed_image=None if case.fixed_image is None else read_mhd(case.fixed_image, VolumeKind.INTENSITY),
    )
    if case.landmarks:
        data.moving_landmarks = LandmarkSet({lm.id: _read_mask(lm.moving) for lm in case.landmarks})
        data.fixed_landmarks = LandmarkSet({lm.id: _read_mask(lm.fixed) for lm in case.landmarks})
    return data
