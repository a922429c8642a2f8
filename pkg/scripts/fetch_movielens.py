"""Put MovieLens 100K at data/ml-100k/u.data.

Tries, in order: a local file given with --source (u.data, the official
ml-100k.zip, or a recbole wheel), the GroupLens download, and the copy
of the same ratings bundled in the recbole wheel on PyPI. The recbole
copy is u.data with a header line, so the header is dropped.
"""

import argparse
import io
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from pathlib import Path

GROUPLENS_URL = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
RECBOLE_MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"
EXPECTED_LINES = 100000


def from_zip(blob: bytes) -> bytes:
    with zipfile.ZipFile(io.BytesIO(blob)) as zf:
        names = zf.namelist()
        if "ml-100k/u.data" in names:
            return zf.read("ml-100k/u.data")
        if RECBOLE_MEMBER in names:
            lines = zf.read(RECBOLE_MEMBER).decode().splitlines()
            return ("\n".join(lines[1:]) + "\n").encode()
    raise ValueError("archive holds neither ml-100k/u.data nor the recbole copy")


def from_source(path: Path) -> bytes:
    blob = path.read_bytes()
    return from_zip(blob) if zipfile.is_zipfile(path) else blob


def from_grouplens() -> bytes:
    with urllib.request.urlopen(GROUPLENS_URL, timeout=30) as resp:
        return from_zip(resp.read())


def from_recbole() -> bytes:
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", "recbole==1.2.1", "--no-deps",
                        "-d", tmp, "-q"], check=True)
        wheel = next(Path(tmp).glob("recbole-*.whl"))
        return from_zip(wheel.read_bytes())


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--source", type=Path)
    parser.add_argument("--dest", type=Path, default=Path("data/ml-100k/u.data"))
    args = parser.parse_args(argv)

    attempts = [lambda: from_source(args.source)] if args.source else []
    attempts += [from_grouplens, from_recbole]
    data, errors = None, []
    for attempt in attempts:
        try:
            data = attempt()
            break
        except Exception as exc:  # each source is optional; report all failures below
            errors.append(str(exc))
    if data is None:
        print("could not obtain MovieLens 100K:\n  " + "\n  ".join(errors), file=sys.stderr)
        return 1
    lines = data.decode().strip().splitlines()
    if len(lines) != EXPECTED_LINES:
        print(f"expected {EXPECTED_LINES} ratings, got {len(lines)}", file=sys.stderr)
        return 1
    args.dest.parent.mkdir(parents=True, exist_ok=True)
    args.dest.write_text("\n".join(lines) + "\n")
    print(f"wrote {args.dest} ({len(lines)} ratings)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
