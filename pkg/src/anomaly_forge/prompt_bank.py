"""Prompt-bank files: normal/abnormal templates plus class-keyword prompts."""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from .encoders import EncoderConfig, encode_text

BANK_VERSION = 1
_CLASS_KEYS = {"name", "normal_templates", "abnormal_templates", "keywords"}
_KEYWORD_KEYS = {"keyword", "prompt"}


class PromptBankError(ValueError):
    """Schema or invariant violation in a prompt bank."""


class TemplateError(PromptBankError):
    """A template uses a placeholder other than ``{class}``."""


@dataclass(frozen=True)
class ClassPrompts:
    class_name: str
    normal_templates: tuple[str, ...]
    abnormal_templates: tuple[str, ...]
    keywords: tuple[str, ...] = ()
    keyword_prompts: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        where = f"class {self.class_name!r}"
        if not self.normal_templates:
            raise PromptBankError(f"{where}: normal_templates must not be empty")
        if not self.abnormal_templates:
            raise PromptBankError(f"{where}: abnormal_templates must not be empty")
        if len(set(self.keywords)) != len(self.keywords):
            raise PromptBankError(f"{where}: keywords contain duplicates")
        if set(self.keywords) != set(self.keyword_prompts):
            missing = sorted(set(self.keywords) ^ set(self.keyword_prompts))
            raise PromptBankError(f"{where}: keywords and keyword_prompts disagree on {missing}")
        raw = list(self.normal_templates) + list(self.abnormal_templates) + [
            self.keyword_prompts[k] for k in self.keywords
        ]
        if len(set(raw)) != len(raw):
            raise PromptBankError(f"{where}: duplicate prompt strings")

    def to_dict(self) -> dict:
        return {
            "name": self.class_name,
            "normal_templates": list(self.normal_templates),
            "abnormal_templates": list(self.abnormal_templates),
            "keywords": [{"keyword": k, "prompt": self.keyword_prompts[k]} for k in self.keywords],
        }


@dataclass(frozen=True)
class PromptMatrix:
    prompts: tuple[str, ...]
    embeddings: np.ndarray  # L2_total x C2, unit rows
    abnormal_mask: np.ndarray  # bool, L2_total
    n_normal: int
    n_abnormal: int

    @property
    def n_prompts(self) -> int:
        return len(self.prompts)

    def category_means(self) -> np.ndarray:
        """Mean embedding of the normal and of the abnormal template block (2 x C2)."""
        e = self.embeddings
        return np.stack(
            [e[: self.n_normal].mean(axis=0), e[self.n_normal : self.n_normal + self.n_abnormal].mean(axis=0)]
        )


def _expect(obj, keys: set, where: str):
    if not isinstance(obj, dict):
        raise PromptBankError(f"{where}: expected an object")
    unknown = set(obj) - keys
    if unknown:
        raise PromptBankError(f"{where}: unknown field(s) {sorted(unknown)}")
    missing = keys - set(obj)
    if missing:
        raise PromptBankError(f"{where}: missing field(s) {sorted(missing)}")


def _strings(value, where: str) -> tuple[str, ...]:
    if not isinstance(value, list) or not all(isinstance(v, str) and v for v in value):
        raise PromptBankError(f"{where}: expected a list of non-empty strings")
    return tuple(value)


def parse_prompt_bank(doc) -> dict[str, ClassPrompts]:
    _expect(doc, {"version", "classes"}, "prompt bank")
    if doc["version"] != BANK_VERSION:
        raise PromptBankError(f"prompt bank: unsupported version {doc['version']!r}")
    if not isinstance(doc["classes"], list):
        raise PromptBankError("prompt bank: 'classes' must be a list")
    bank: dict[str, ClassPrompts] = {}
    for i, entry in enumerate(doc["classes"]):
        _expect(entry, _CLASS_KEYS, f"classes[{i}]")
        name = entry["name"]
        if not isinstance(name, str) or not name:
            raise PromptBankError(f"classes[{i}].name: expected a non-empty string")
        if name in bank:
            raise PromptBankError(f"duplicate class name {name!r}")
        where = f"class {name!r}"
        if not isinstance(entry["keywords"], list):
            raise PromptBankError(f"{where}.keywords: expected a list")
        keywords, prompts = [], {}
        for j, kw in enumerate(entry["keywords"]):
            _expect(kw, _KEYWORD_KEYS, f"{where}.keywords[{j}]")
            k, p = kw["keyword"], kw["prompt"]
            if not isinstance(k, str) or not k or not isinstance(p, str) or not p:
                raise PromptBankError(f"{where}.keywords[{j}]: keyword and prompt must be non-empty strings")
            if k in prompts:
                raise PromptBankError(f"{where}.keywords: keyword {k!r} listed twice")
            keywords.append(k)
            prompts[k] = p
        bank[name] = ClassPrompts(
            name,
            _strings(entry["normal_templates"], f"{where}.normal_templates"),
            _strings(entry["abnormal_templates"], f"{where}.abnormal_templates"),
            tuple(keywords),
            prompts,
        )
    return bank


def load_prompt_bank(path: str | Path) -> dict[str, ClassPrompts]:
    """Load and validate a prompt-bank JSON file."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"prompt bank not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise PromptBankError(f"{path}: not valid JSON ({exc})") from exc
    return parse_prompt_bank(doc)


def dump_prompt_bank(bank: dict[str, ClassPrompts]) -> str:
    """Canonical JSON text for a bank (classes in insertion order)."""
    doc = {"version": BANK_VERSION, "classes": [cp.to_dict() for cp in bank.values()]}
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


def bundled_bank_path(name: str = "prompts.json") -> Path:
    return Path(str(resources.files("anomaly_forge") / "data" / name))


def _substitute(template: str, class_name: str) -> str:
    for _, field_name, spec, conv in string.Formatter().parse(template):
        if field_name is None:
            continue
        if field_name != "class" or spec or conv:
            raise TemplateError(f"unknown placeholder {{{field_name}}} in template {template!r}")
    return template.format(**{"class": class_name})


def expand_templates(cp: ClassPrompts) -> list[str]:
    """Normal templates, abnormal templates, keyword prompts; ``{class}`` filled in."""
    out = [_substitute(t, cp.class_name) for t in cp.normal_templates]
    out += [_substitute(t, cp.class_name) for t in cp.abnormal_templates]
    out += [_substitute(cp.keyword_prompts[k], cp.class_name) for k in cp.keywords]
    if len(set(out)) != len(out):
        dup = sorted({p for p in out if out.count(p) > 1})
        raise PromptBankError(f"class {cp.class_name!r}: expansion yields duplicate prompts {dup}")
    return out


def build_prompt_matrix(
    cp: ClassPrompts, text_encoder: Callable[[str], np.ndarray] | EncoderConfig
) -> PromptMatrix:
    if isinstance(text_encoder, EncoderConfig):
        cfg = text_encoder
        text_encoder = lambda s: encode_text(s, cfg)  # noqa: E731
    prompts = expand_templates(cp)
    rows = np.concatenate([np.asarray(text_encoder(p), dtype=np.float64).reshape(1, -1) for p in prompts])
    rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    n_norm, n_abn = len(cp.normal_templates), len(cp.abnormal_templates)
    mask = np.zeros(len(prompts), dtype=bool)
    mask[n_norm:] = True
    return PromptMatrix(tuple(prompts), rows, mask, n_norm, n_abn)
