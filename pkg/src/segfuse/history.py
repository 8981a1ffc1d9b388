from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional


@dataclass
class TrainingHistory:
    stage: str
    entries: List[dict] = field(default_factory=list)
    best: Optional[dict] = None

    def __len__(self) -> int:
        return len(self.entries)

    def column(self, key: str) -> list:
        return [e[key] for e in self.entries]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path: Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: Path) -> "TrainingHistory":
        return cls(**json.loads(Path(path).read_text()))
