"""Regenerate tests/data/reference_imphash.json using pefile as the oracle.

Run from the repository root: ``python tests/make_reference_digests.py``.
"""
import json
import sys
from pathlib import Path

import pefile

sys.path.insert(0, str(Path(__file__).parent))
from corpus import corpus  # noqa: E402

SAMPLE = 20


def main():
    digests = [pefile.PE(data=data, fast_load=False).get_imphash() for data in corpus()[:SAMPLE]]
    out = Path(__file__).parent / "data" / "reference_imphash.json"
    out.write_text(json.dumps({"oracle": f"pefile {pefile.__version__}", "digests": digests}, indent=2) + "\n")


if __name__ == "__main__":
    main()
