"""Import hashing and imphash-breaking thunk shuffling for PE files."""
from .codec import parse_pe, read_import_directory, read_reloc_directory, serialize, update_checksum
from .errors import PeToolError
from .forge import SynthSpec, build_pe
from .imphash import ImphashReport, Mode, imphash
from .model import MachineClass, PeImage
from .shuffler import Strategy, TransformResult, transform
from .verifier import MockExportUniverse, assert_equivalent, simulate_bind

__version__ = "0.1.0"

__all__ = [
    "ImphashReport",
    "MachineClass",
    "Mode",
    "MockExportUniverse",
    "PeImage",
    "PeToolError",
    "Strategy",
    "SynthSpec",
    "TransformResult",
    "assert_equivalent",
    "build_pe",
    "imphash",
    "parse_pe",
    "read_import_directory",
    "read_reloc_directory",
    "serialize",
    "simulate_bind",
    "transform",
    "update_checksum",
]
