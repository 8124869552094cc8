"""Deterministic synthetic corpus shared by the test modules."""
from __future__ import annotations

import random

from breakimp.forge import SynthSpec, build_pe
from breakimp.model import MachineClass

MODULE_NAMES = [
    "kernel32.dll", "USER32.dll", "advapi32.dll", "ole32.dll", "shell32.dll",
    "gdi32.dll", "ntdll.dll", "msvcrt.dll", "comctl32.ocx", "driver.sys",
    "custom.drv", "noext", "Mixed.Case.DLL", "crypt32.dll",
]

OLE32_SYMBOLS = ["CoInitialize", "CoCreateGuid", "CoUninitialize"]


def corpus_specs(count: int = 100, seed: int = 20261014) -> list[SynthSpec]:
    """Machine classes x 1-8 modules x 1-64 symbols x OFT present/absent."""
    rng = random.Random(seed)
    specs = []
    for i in range(count):
        mc = MachineClass.PE32 if i % 2 == 0 else MachineClass.PE32PLUS
        emit_oft = (i // 2) % 2 == 0
        if i < 4:
            n_modules, sizes = 1, [1] if i < 2 else [64]
        elif i < 8:
            n_modules = 8
            sizes = [64] * 8 if i < 6 else [1] * 8
        else:
            n_modules = rng.randint(1, 8)
            sizes = [rng.randint(1, 64) for _ in range(n_modules)]
        names = rng.sample(MODULE_NAMES, n_modules)
        modules = []
        for name, size in zip(names, sizes):
            if i % 5 == 3 and size >= 3:
                symbols = [f"Fn{j}_{name.split('.')[0]}" for j in range(size)]
                symbols[rng.randrange(size)] = rng.randint(1, 999)
                modules.append((name, symbols))
            else:
                modules.append((name, size))
        stripped = i % 7 == 5
        specs.append(SynthSpec(
            machine_class=mc,
            modules=modules,
            call_sites_per_symbol=rng.randint(1, 2),
            emit_oft=emit_oft,
            emit_relocs=not stripped,
            set_relocs_stripped=stripped,
            seed=1000 + i,
            pointer_table=(mc is MachineClass.PE32PLUS and not stripped and i % 3 == 0),
            decoy_patterns=rng.randint(0, 3),
            compute_checksum=(i % 4 == 1),
        ))
    return specs


def corpus(count: int = 100) -> list[bytes]:
    return [build_pe(s) for s in corpus_specs(count)]


def great_exe_spec(machine_class: MachineClass = MachineClass.PE32, **kw) -> SynthSpec:
    """Two-module layout: ole32 x 3 then kernel32 x 66."""
    return SynthSpec(
        machine_class=machine_class,
        modules=[("ole32.dll", list(OLE32_SYMBOLS)), ("kernel32.dll", 66)],
        seed=69,
        **kw,
    )
