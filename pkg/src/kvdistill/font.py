"""5x5 bitmaps for glyphs A-Z, 0-9 and the four scene shapes."""
import numpy as np

_GLYPHS = {
    "A": ".###. #...# ##### #...# #...#",
    "B": "####. #...# ####. #...# ####.",
    "C": ".#### #.... #.... #.... .####",
    "D": "####. #...# #...# #...# ####.",
    "E": "##### #.... ####. #.... #####",
    "F": "##### #.... ####. #.... #....",
    "G": ".#### #.... #..## #...# .###.",
    "H": "#...# #...# ##### #...# #...#",
    "I": "##### ..#.. ..#.. ..#.. #####",
    "J": "..### ...#. ...#. #..#. .##..",
    "K": "#..#. #.#.. ##... #.#.. #..#.",
    "L": "#.... #.... #.... #.... #####",
    "M": "#...# ##.## #.#.# #...# #...#",
    "N": "#...# ##..# #.#.# #..## #...#",
    "O": ".###. #...# #...# #...# .###.",
    "P": "####. #...# ####. #.... #....",
    "Q": ".###. #...# #.#.# #..#. .##.#",
    "R": "####. #...# ####. #.#.. #..##",
    "S": ".#### #.... .###. ....# ####.",
    "T": "##### ..#.. ..#.. ..#.. ..#..",
    "U": "#...# #...# #...# #...# .###.",
    "V": "#...# #...# #...# .#.#. ..#..",
    "W": "#...# #...# #.#.# ##.## #...#",
    "X": "#...# .#.#. ..#.. .#.#. #...#",
    "Y": "#...# .#.#. ..#.. ..#.. ..#..",
    "Z": "##### ...#. ..#.. .#... #####",
    "0": ".###. #..## #.#.# ##..# .###.",
    "1": "..#.. .##.. ..#.. ..#.. .###.",
    "2": ".###. #...# ..##. .#... #####",
    "3": "####. ....# .###. ....# ####.",
    "4": "#..#. #..#. ##### ...#. ...#.",
    "5": "##### #.... ####. ....# ####.",
    "6": ".###. #.... ####. #...# .###.",
    "7": "##### ...#. ..#.. .#... .#...",
    "8": ".###. #...# .###. #...# .###.",
    "9": ".###. #...# .#### ....# .###.",
}

_SHAPES = {
    "circle": ".###. ##### ##### ##### .###.",
    "square": "##### ##### ##### ##### #####",
    "triangle": "..#.. .###. .###. ##### #####",
    "cross": "..#.. ..#.. ##### ..#.. ..#..",
}

GLYPH_CHARS = tuple(_GLYPHS)
SHAPE_NAMES = tuple(_SHAPES)
CELL = 6
SIZE = 5


def _parse(rows: str) -> np.ndarray:
    out = np.array([[c == "#" for c in row] for row in rows.split()], dtype=np.float64)
    assert out.shape == (SIZE, SIZE)
    out.flags.writeable = False
    return out


GLYPH_BITMAPS = {k: _parse(v) for k, v in _GLYPHS.items()}
SHAPE_BITMAPS = {k: _parse(v) for k, v in _SHAPES.items()}


def bitmap(kind: str, name: str) -> np.ndarray:
    table = GLYPH_BITMAPS if kind == "glyph" else SHAPE_BITMAPS
    return table[name]
