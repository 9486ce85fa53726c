import json
import os
import sys
from dataclasses import dataclass
from typing import List

from rich import print as rprint

from lib.actions import Action, ActionType


@dataclass(frozen=True)
class TranscriptEntry:
    thread: int
    action: Action

    def to_dict(self) -> dict:
        a = self.action
        return {"thread": self.thread, "tag": a.atype.letter, "src": a.src, "value": a.value}

    @classmethod
    def from_dict(cls, item: dict) -> "TranscriptEntry":
        action = Action(ActionType.from_letter(item["tag"]), item["src"], item["value"])
        action.validate()
        return cls(int(item["thread"]), action)


def load(filepath: str) -> List[TranscriptEntry]:
    if not os.path.exists(filepath): return []
    try:
        with open(filepath, 'r', encoding='utf-8') as f:
            data = json.load(f)
            return [TranscriptEntry.from_dict(item) for item in data] if isinstance(data, list) else []
    except (IOError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        rprint(f"[red]Warn:[/red] Could not load transcript from '{filepath}': {e}", file=sys.stderr)
        return []

def save(filepath: str, entries: List[TranscriptEntry]) -> None:
    try:
        with open(filepath, 'w', encoding='utf-8') as f:
            json.dump([e.to_dict() for e in entries], f, indent=1)
    except IOError as e:
        rprint(f"[red]Warn:[/red] Could not save transcript to '{filepath}': {e}", file=sys.stderr)
