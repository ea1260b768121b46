import json
import logging
from dataclasses import dataclass, fields, is_dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import matplotlib
from matplotlib import pyplot as plt
from matplotlib import patches
import pandas as pd

from richwasm.core.ir import LocConst, Mem

DIAGNOSTIC_CODES = {
    'PAR001': 'lexical error',
    'PAR002': 'syntax error',
    'PAR003': 'unbound name',
    'PAR004': 'wrong arity or shape of a form',
    'TYP001': 'stack underflow or shape mismatch',
    'TYP002': 'qualifier constraint violated',
    'TYP003': 'size constraint violated',
    'TYP004': 'label or branch mismatch',
    'TYP005': 'index out of range',
    'TYP006': 'ill-scoped or invalid type',
    'TYP007': 'instantiation does not satisfy quantifier bounds',
    'LIN001': 'duplicate use of a linear value',
    'LIN002': 'linear value dropped',
    'LIN003': 'linear value left in a local',
    'LIN004': 'free of a non-linear reference',
    'CAP001': 'capability stored in the heap',
    'CAP002': 'write through a read-only reference',
    'MEM001': 'dangling reference',
    'HEAP001': 'heap value does not match its heap type',
    'LNK001': 'unresolved import',
    'LNK002': 'import type mismatch',
    'ML001': 'ML type error',
    'L3001': 'L3 linearity error',
    'L3002': 'L3 size error',
    'L3003': 'L3 type error',
    'LOW001': 'construct outside the lowerable fragment',
    'CLI001': 'usage error',
}

DIAGNOSTIC_COLUMNS = ['code', 'severity', 'file', 'line', 'column', 'message']


@dataclass(frozen=True)
class SourceSpan:
    file: str
    start: Tuple[int, int]
    end: Tuple[int, int]


@dataclass(frozen=True)
class Diagnostic:
    severity: str
    code: str
    message: str
    span: Optional[SourceSpan] = None

    def __post_init__(self):
        assert self.code in DIAGNOSTIC_CODES, f'Unknown diagnostic code {self.code}.'
        assert self.severity in ('error', 'warning'), f'Severity must be error or warning.'

    def __str__(self) -> str:
        where = ''
        if self.span is not None:
            where = f'{self.span.file}:{self.span.start[0]}:{self.span.start[1]}: '
        return f'{where}{self.severity} {self.code}: {self.message}'

    def to_json(self) -> str:
        line, column = self.span.start if self.span is not None else (None, None)
        return json.dumps({'code': self.code,
                           'severity': self.severity,
                           'file': self.span.file if self.span is not None else None,
                           'line': line,
                           'column': column,
                           'message': self.message})


class RichWasmError(ValueError):
    """Base class for user-facing failures; carries the diagnostics that explain them."""

    def __init__(self, diagnostics: List[Diagnostic]):
        assert len(diagnostics) > 0, f'An error needs at least one diagnostic.'
        self.diagnostics = list(diagnostics)
        super().__init__('\n'.join(str(d) for d in self.diagnostics))

    @property
    def code(self) -> str:
        return self.diagnostics[0].code


class ParseError(RichWasmError):
    pass


class CheckError(RichWasmError):
    pass


class LinkError(RichWasmError):
    pass


class LowerError(RichWasmError):
    pass


class FrontendError(RichWasmError):
    pass


class IllScopedError(ValueError):
    pass


class SubstitutionKindError(ValueError):
    pass


class InterpreterFault(RuntimeError):
    pass


def error(code: str,
          message: str,
          span: Optional[SourceSpan] = None) -> Diagnostic:
    return Diagnostic('error', code, message, span)


def diagnostics_to_df(diagnostics: Iterable[Diagnostic]) -> pd.DataFrame:
    """Tabulates diagnostics

    Parameters
    ----------
    diagnostics: Iterable[Diagnostic]
        Diagnostics, e.g. taken from a RichWasmError

    Returns
    -------
    df: pd.DataFrame
        One row per diagnostic with columns ['code', 'severity', 'file', 'line', 'column', 'message']
    """
    rows = []
    for d in diagnostics:
        line, column = d.span.start if d.span is not None else (None, None)
        rows.append([d.code, d.severity, d.span.file if d.span is not None else None, line, column, d.message])
    return pd.DataFrame(rows, columns=DIAGNOSTIC_COLUMNS)


def configure_logging(verbosity: int = 0) -> None:
    """Routes package logging to stderr; 0 -> WARNING, 1 -> INFO, 2 or more -> DEBUG."""
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(max(verbosity, 0), 2)]
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter('%(levelname)s %(name)s: %(message)s'))
    root = logging.getLogger('richwasm')
    root.handlers = [handler]
    root.setLevel(level)


def referenced_locations(node) -> List[LocConst]:
    """Concrete locations mentioned anywhere inside a value or heap value."""
    found = []

    def walk(n):
        if isinstance(n, LocConst):
            found.append(n)
        elif isinstance(n, tuple):
            for x in n:
                walk(x)
        elif is_dataclass(n):
            for f in fields(n):
                walk(getattr(n, f.name))

    walk(node)
    return found


def visualize_store(store,
                    title: str = None,
                    colors: Dict[Mem, str] = None,
                    figsize: Tuple[float, float] = (8, 6),
                    ax: matplotlib.axes.Axes = None,
                    dpi: int = 72) -> Tuple[matplotlib.figure.Figure, matplotlib.axes.Axes]:
    """Draws the two memories of an interpreter store, one column per memory, with an arrow for every reference
    held by a heap value.

    Parameters
    ----------
    store: richwasm.core.interp.Store
        Store whose memories are drawn.

    title: str, default = None
        Title of the figure.

    colors: Dict[Mem, str], default = None
        Face color per memory.

    figsize: Tuple[float, float], default: [8, 6])
        Figure size

    ax: matplotlib.axes.Axes
         Axes object

    dpi: int
        Resolution of the figure.

    Returns
    -------
    fig: matplotlib.figure.Figure
        Figure instance

    ax: matplotlib.axes.Axes
         Axes object
    """
    colors = {Mem.LIN: 'tab:orange', Mem.UNR: 'tab:blue'} if colors is None else colors
    fig = None
    if ax is None:
        fig = plt.figure(figsize=figsize, dpi=dpi)
        ax = plt.subplot(1, 1, 1)

    anchors = {}
    rows = 1
    for column, mem in enumerate([Mem.LIN, Mem.UNR]):
        cells = sorted(store.mem[mem].items())
        rows = max(rows, len(cells))
        for row, (address, (hv, size)) in enumerate(cells):
            rect = patches.Rectangle((column * 3, -row * 1.5), 2, 1, linewidth=1,
                                     edgecolor='k', facecolor=colors[mem], alpha=0.6)
            ax.add_patch(rect)
            ax.text(column * 3 + 1, -row * 1.5 + 0.5, f'{mem.value} {address}\n{type(hv).__name__} {size}b',
                    ha='center', va='center', fontsize=8)
            anchors[(mem, address)] = (column * 3 + 1, -row * 1.5 + 0.5)

    for (mem, address), (x, y) in anchors.items():
        hv, _ = store.mem[mem][address]
        for target in referenced_locations(hv):
            if (target.mem, target.address) in anchors:
                tx, ty = anchors[(target.mem, target.address)]
                ax.annotate('', xy=(tx, ty), xytext=(x, y), arrowprops=dict(arrowstyle='->', lw=1))

    ax.set_xlim([-0.5, 5.5])
    ax.set_ylim([-rows * 1.5, 1.5])
    ax.set_title(label=title)
    ax.set_axis_off()
    ax.legend([patches.Patch(linewidth=1, edgecolor='k', facecolor=colors[mem]) for mem in [Mem.LIN, Mem.UNR]],
              ['linear memory', 'unrestricted memory'], loc='upper right', framealpha=1)

    if fig is not None:
        plt.tight_layout()

    return fig, ax
