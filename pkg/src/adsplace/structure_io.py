"""Extended-XYZ style structure files.

Layout::

    <n atoms>
    Lattice="ax ay az bx by bz cx cy cz" pbc="T T F"
    <symbol> <x> <y> <z> [<tag>]
    ...

Positions are Cartesian Å. The tag column (0 fixed slab, 1 free slab,
2 adsorbate) is optional; when absent every atom is read as a free slab atom.
"""

from __future__ import annotations

import shlex
import warnings
from pathlib import Path

import numpy as np
from ase.data import atomic_numbers, chemical_symbols

from .errors import MissingLattice, ParseError, UnknownSpecies
from .lattice import AdslabSystem, LatticeCell, Tag


def _col_of(line: str, field_index: int) -> int:
    """1-based column where whitespace-separated field ``field_index`` starts."""
    pos = 0
    for k, tok in enumerate(line.split()):
        pos = line.index(tok, pos)
        if k == field_index:
            return pos + 1
        pos += len(tok)
    return len(line) + 1


def parse_comment(comment: str, lineno: int = 2) -> tuple[LatticeCell, tuple[bool, bool, bool]]:
    try:
        fields = shlex.split(comment)
    except ValueError as exc:
        raise ParseError(f"unbalanced quotes in comment line: {exc}", lineno, 1) from None
    kv = {}
    for f in fields:
        if "=" in f:
            k, v = f.split("=", 1)
            kv[k.strip().lower()] = v
    if "lattice" not in kv:
        raise MissingLattice("comment line carries no Lattice=\"...\" entry", lineno, 1)
    col = comment.lower().find("lattice") + 1
    try:
        nums = [float(x) for x in kv["lattice"].split()]
    except ValueError:
        raise ParseError("lattice entries must be numbers", lineno, col) from None
    if len(nums) != 9:
        raise ParseError(f"lattice needs 9 numbers, got {len(nums)}", lineno, col)
    pbc = (True, True, False)
    if "pbc" in kv:
        flags = kv["pbc"].split()
        if len(flags) != 3 or any(f.upper() not in ("T", "F", "TRUE", "FALSE", "1", "0") for f in flags):
            raise ParseError("pbc must hold three T/F flags", lineno, comment.lower().find("pbc") + 1)
        pbc = tuple(f.upper() in ("T", "TRUE", "1") for f in flags)
    return LatticeCell(np.array(nums).reshape(3, 3), pbc), pbc


def parse_structure_text(text: str) -> AdslabSystem:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise ParseError("missing atom count", 1, 1)
    try:
        n = int(lines[0].split()[0])
    except ValueError:
        raise ParseError("atom count is not an integer", 1, _col_of(lines[0], 0)) from None
    if n < 0:
        raise ParseError("negative atom count", 1, 1)
    if len(lines) < 2:
        raise MissingLattice("missing comment line", 2, 1)
    cell, _ = parse_comment(lines[1])
    if len(lines) < 2 + n:
        raise ParseError(f"expected {n} atom lines, found {len(lines) - 2}", len(lines) + 1, 1)

    positions = np.zeros((n, 3))
    species = np.zeros(n, int)
    tags = np.full(n, int(Tag.FREE_SLAB))
    missing_tags = 0
    for i in range(n):
        lineno = i + 3
        line = lines[i + 2]
        tok = line.split()
        if len(tok) < 4:
            raise ParseError(f"atom line needs symbol and x y z, got {len(tok)} fields", lineno, len(line) + 1)
        sym = tok[0]
        if sym not in atomic_numbers or atomic_numbers[sym] == 0:
            raise UnknownSpecies(f"unknown element symbol {sym!r} at line {lineno}")
        species[i] = atomic_numbers[sym]
        for k in range(3):
            try:
                positions[i, k] = float(tok[k + 1])
            except ValueError:
                raise ParseError(f"bad coordinate {tok[k + 1]!r}", lineno, _col_of(line, k + 1)) from None
        if not np.isfinite(positions[i]).all():
            raise ParseError("non-finite coordinate", lineno, _col_of(line, 1))
        if len(tok) >= 5:
            try:
                tag = int(tok[4])
                Tag(tag)
            except ValueError:
                raise ParseError(f"bad tag {tok[4]!r} (expected 0, 1 or 2)", lineno, _col_of(line, 4)) from None
            tags[i] = tag
        else:
            missing_tags += 1
    if missing_tags:
        warnings.warn(f"{missing_tags} atom line(s) without a tag column read as FREE_SLAB", stacklevel=2)
    return AdslabSystem(positions, species, tags, cell)


def parse_structure_file(path) -> AdslabSystem:
    return parse_structure_text(Path(path).read_text())


def format_structure(system: AdslabSystem, comment_extra: str = "") -> str:
    lat = " ".join(f"{x:.12g}" for x in system.cell.basis.ravel())
    pbc = " ".join("T" if p else "F" for p in system.cell.pbc)
    head = f'Lattice="{lat}" pbc="{pbc}"'
    if comment_extra:
        head += " " + comment_extra
    out = [str(len(system)), head]
    for z, p, t in zip(system.species, system.positions, system.tags):
        out.append(f"{chemical_symbols[z]} {p[0]:.12g} {p[1]:.12g} {p[2]:.12g} {int(t)}")
    return "\n".join(out) + "\n"


def write_structure_file(path, system: AdslabSystem, comment_extra: str = "") -> None:
    Path(path).write_text(format_structure(system, comment_extra))


def read_frames(path) -> list[AdslabSystem]:
    """All frames of a multi-frame file (frames concatenated back to back)."""
    lines = Path(path).read_text().splitlines()
    frames, i = [], 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        try:
            n = int(lines[i].split()[0])
        except ValueError:
            raise ParseError("atom count is not an integer", i + 1, 1) from None
        chunk = "\n".join(lines[i : i + n + 2])
        try:
            frames.append(parse_structure_text(chunk))
        except ParseError as exc:
            if exc.line is None:
                raise
            raise type(exc)(str(exc).split(" (line")[0], exc.line + i, exc.col) from None
        i += n + 2
    return frames


def write_frames(path, systems) -> None:
    Path(path).write_text("".join(format_structure(s) for s in systems))
