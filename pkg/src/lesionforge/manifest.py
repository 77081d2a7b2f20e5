"""JSON study manifests: where each study's volumes live and which cohorts use them.

    {
      "studies": {"s001": {"sequences": {"FLAIR": "s001/FLAIR.mvol", ...},
                           "labels": "s001/labels.mvol"}},
      "cohorts": {"pretrain": ["s001"], "finetune": ["s001"], "validation": [], "test": []},
      "overlap": [["pretrain", "finetune"]]
    }

Relative paths resolve against the manifest's directory.  Cohorts must be
disjoint unless the pair is listed under ``overlap``.
"""
import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .io import mvol_read
from .preprocess import SEQUENCES, Study


@dataclass
class StudyEntry:
    sequences: dict  # name -> path (missing names are absent)
    labels: object = None  # path or None


@dataclass
class Manifest:
    studies: dict
    cohorts: dict = field(default_factory=dict)
    overlap: list = field(default_factory=list)
    root: Path = Path(".")

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise DataError(f"manifest {path} not found") from None
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest {path} is not valid JSON: {exc.msg}", exc.pos) from None
        return cls.from_dict(raw, path.parent)

    @classmethod
    def from_dict(cls, raw, root="."):
        if not isinstance(raw, dict) or not isinstance(raw.get("studies"), dict):
            raise DataError("manifest needs a 'studies' object")
        studies = {}
        for sid, entry in raw["studies"].items():
            seqs = {k: v for k, v in entry.get("sequences", {}).items() if v}
            unknown = set(seqs) - set(SEQUENCES)
            if unknown:
                raise DataError(f"study {sid!r}: unknown sequences {sorted(unknown)}")
            studies[sid] = StudyEntry(seqs, entry.get("labels"))
        m = cls(studies, {k: list(v) for k, v in raw.get("cohorts", {}).items()},
                [tuple(pair) for pair in raw.get("overlap", [])], Path(root))
        m.check()
        return m

    def to_dict(self):
        return {
            "studies": {sid: {"sequences": dict(e.sequences), "labels": e.labels}
                        for sid, e in self.studies.items()},
            "cohorts": self.cohorts,
            "overlap": [list(p) for p in self.overlap],
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def resolve(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.root / p

    def check(self):
        for name, ids in self.cohorts.items():
            missing = [i for i in ids if i not in self.studies]
            if missing:
                raise DataError(f"cohort {name!r} names unknown studies {missing}")
        allowed = {frozenset(p) for p in self.overlap}
        for a, b in combinations(self.cohorts, 2):
            shared = set(self.cohorts[a]) & set(self.cohorts[b])
            if shared and frozenset((a, b)) not in allowed:
                raise DataError(f"cohorts {a!r} and {b!r} share {sorted(shared)} "
                                f"without an overlap declaration")

    def files(self, sid):
        e = self.studies[sid]
        out = [self.resolve(p) for p in e.sequences.values()]
        if e.labels:
            out.append(self.resolve(e.labels))
        return out

    def check_files(self, ids=None):
        """Every referenced file exists and each study's volumes share dims."""
        for sid in ids if ids is not None else self.studies:
            dims = set()
            for f in self.files(sid):
                if not f.exists():
                    raise DataError(f"study {sid!r}: missing file {f}")
                head = f.read_bytes()[:17]
                if len(head) == 17:
                    dims.add(tuple(np.frombuffer(head, "<u4", 3, 5)))
            if len(dims) > 1:
                raise DataError(f"study {sid!r}: volumes disagree on dims {sorted(dims)}")

    def cohort(self, name):
        if name not in self.cohorts:
            raise DataError(f"manifest has no cohort {name!r}")
        return list(self.cohorts[name])

    def load_study(self, sid, drop=(), fill="zero"):
        """Read a study; a sequence absent from the manifest is an error unless in ``drop``."""
        if sid not in self.studies:
            raise DataError(f"unknown study {sid!r}")
        e = self.studies[sid]
        seqs = {}
        for name in SEQUENCES:
            if name in e.sequences and name not in drop:
                seqs[name] = mvol_read(self.resolve(e.sequences[name])).astype(np.float32)
        missing = [s for s in SEQUENCES if s not in seqs and s not in drop]
        if missing:
            raise DataError(f"study {sid!r} is missing {missing}; pass --drop to blank them")
        labels = mvol_read(self.resolve(e.labels)) if e.labels else None
        if not seqs:
            raise DataError(f"study {sid!r} has no sequences left")
        shape = next(iter(seqs.values())).shape
        for name in drop:
            if name not in SEQUENCES:
                raise DataError(f"cannot drop unknown sequence {name!r}")
            if fill == "mean" and name in e.sequences:
                vol = mvol_read(self.resolve(e.sequences[name]))
                nz = vol[vol != 0]
                seqs[name] = np.full(shape, nz.mean() if nz.size else 0.0, np.float32)
            else:
                seqs[name] = np.zeros(shape, np.float32)
        study = Study(seqs, labels, study_id=sid)
        if drop:
            study.meta["dropped"] = list(drop)
        return study

    def load_cohort(self, name, drop=(), fill="zero"):
        return [self.load_study(sid, drop, fill) for sid in self.cohort(name)]
