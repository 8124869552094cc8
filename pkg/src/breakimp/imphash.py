"""Import hashing in two flavours.

``Mode.PAPER`` concatenates ``module.symbol`` entries with no separator and
strips any module extension. ``Mode.COMPAT`` follows the convention used by
deployed tooling: comma separators, only ``dll``/``ocx``/``sys`` are stripped,
and ordinal imports become ``ordN`` unless an ordinal table names them.
"""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional

from .codec import read_import_directory
from .errors import NoImportTable, NoSymbolName
from .model import ImportDescriptor, Ordinal, PeImage

COMPAT_EXTENSIONS = frozenset({"dll", "ocx", "sys"})

OrdinalTable = Mapping[str, Mapping[int, str]]


class Mode(enum.Enum):
    PAPER = "paper"
    COMPAT = "compat"


@dataclass(frozen=True)
class ImphashReport:
    mode: Mode
    canonical_string: str
    digest: str

    def to_json(self, show_string: bool = True) -> dict:
        out = {"mode": self.mode.value, "digest": self.digest}
        if show_string:
            out["canonical_string"] = self.canonical_string
        return out


def _module_stem(name: str, mode: Mode) -> str:
    name = name.lower()
    if "." not in name:
        return name
    stem, ext = name.rsplit(".", 1)
    if mode is Mode.PAPER or ext in COMPAT_EXTENSIONS:
        return stem
    return name


def canonical_import_string(
    descriptors: Iterable[ImportDescriptor],
    mode: Mode,
    ordinal_names: Optional[OrdinalTable] = None,
) -> str:
    entries = []
    for desc in descriptors:
        module = _module_stem(desc.module_name, mode)
        for thunk in desc.thunks:
            if isinstance(thunk.payload, Ordinal):
                if mode is Mode.PAPER:
                    raise NoSymbolName(
                        f"{desc.module_name} imports ordinal {thunk.payload.value}, "
                        "which paper mode cannot name"
                    )
                symbol = _ordinal_name(desc.module_name, thunk.payload.value, ordinal_names)
            else:
                symbol = thunk.payload.name
            entries.append(f"{module}.{symbol.lower()}")
    return ("," if mode is Mode.COMPAT else "").join(entries)


def _ordinal_name(module: str, ordinal: int, table: Optional[OrdinalTable]) -> str:
    if table:
        names = table.get(module.lower())
        if names and ordinal in names:
            return names[ordinal]
    return f"ord{ordinal}"


def digest_of(canonical: str) -> str:
    return hashlib.md5(canonical.encode("utf-8")).hexdigest()


def imphash_of_descriptors(
    descriptors: Iterable[ImportDescriptor],
    mode: Mode = Mode.COMPAT,
    ordinal_names: Optional[OrdinalTable] = None,
) -> ImphashReport:
    canonical = canonical_import_string(descriptors, mode, ordinal_names)
    return ImphashReport(mode, canonical, digest_of(canonical))


def imphash(
    image: PeImage,
    mode: Mode = Mode.COMPAT,
    ordinal_names: Optional[OrdinalTable] = None,
) -> ImphashReport:
    try:
        descriptors = read_import_directory(image)
    except NoImportTable:
        descriptors = []
    return imphash_of_descriptors(descriptors, mode, ordinal_names)


def load_ordinal_table(path) -> dict[str, dict[int, str]]:
    """Read a JSON document ``{"ws2_32.dll": {"23": "socket", ...}, ...}``."""
    doc = json.loads(Path(path).read_text())
    return {
        module.lower(): {int(k, 0) if isinstance(k, str) else int(k): str(v) for k, v in names.items()}
        for module, names in doc.items()
    }
