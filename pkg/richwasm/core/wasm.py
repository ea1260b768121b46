"""A small model of WebAssembly 1.0 modules (with multi-value results) and its text and binary encodings.

Instructions are tuples whose first element is the Wasm mnemonic, e.g. ``('i32.const', 5)``, ``('local.get', 0)``,
``('i32.load', 8)`` (the argument is the static offset), ``('call', 3)``, ``('call_indirect', (params, results))``.
Structured instructions nest their bodies: ``('block', body)``, ``('loop', body)``, ``('if', then, else)``. Every
block has the empty block type; values cross block boundaries through locals.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import leb128
import numpy as np

ValType = str
Sig = Tuple[Tuple[ValType, ...], Tuple[ValType, ...]]

PAGE = 65536

_VALTYPE_CODES = {'i32': 0x7F, 'i64': 0x7E, 'f32': 0x7D, 'f64': 0x7C}


@dataclass
class WasmFunc:
    name: str
    params: Tuple[ValType, ...]
    results: Tuple[ValType, ...]
    locals: List[ValType] = field(default_factory=list)
    body: List[tuple] = field(default_factory=list)
    exports: Tuple[str, ...] = ()

    @property
    def sig(self) -> Sig:
        return tuple(self.params), tuple(self.results)


@dataclass
class WasmImport:
    module: str
    name: str
    params: Tuple[ValType, ...]
    results: Tuple[ValType, ...]

    @property
    def sig(self) -> Sig:
        return tuple(self.params), tuple(self.results)


@dataclass
class WasmGlobal:
    valtype: ValType
    mutable: bool
    init: float = 0
    exports: Tuple[str, ...] = ()


@dataclass
class WasmModule:
    imports: List[WasmImport] = field(default_factory=list)
    funcs: List[WasmFunc] = field(default_factory=list)
    table: List[int] = field(default_factory=list)
    memory: Optional[Tuple[int, int]] = None
    memory_export: Optional[str] = None
    globals: List[WasmGlobal] = field(default_factory=list)
    start: Optional[int] = None
    data: List[Tuple[int, bytes]] = field(default_factory=list)

    def func_index(self, name: str) -> int:
        for i, f in enumerate(self.funcs):
            if f.name == name:
                return len(self.imports) + i
        raise KeyError(name)

    def signature(self, index: int) -> Sig:
        if index < len(self.imports):
            return self.imports[index].sig
        return self.funcs[index - len(self.imports)].sig

    def types(self) -> List[Sig]:
        """Distinct function signatures in first-use order (imports, functions, then indirect calls)."""
        found: Dict[Sig, None] = {}
        for imp in self.imports:
            found.setdefault(imp.sig)
        for f in self.funcs:
            found.setdefault(f.sig)
        for f in self.funcs:
            for instr in iter_instrs(f.body):
                if instr[0] == 'call_indirect':
                    found.setdefault(_sig(instr[1]))
        return list(found)

    def exports(self) -> List[Tuple[str, str, int]]:
        out = []
        for i, f in enumerate(self.funcs):
            for name in f.exports:
                out.append((name, 'func', len(self.imports) + i))
        if self.memory is not None and self.memory_export:
            out.append((self.memory_export, 'memory', 0))
        for i, g in enumerate(self.globals):
            for name in g.exports:
                out.append((name, 'global', i))
        return out


def _sig(sig) -> Sig:
    params, results = sig
    return tuple(params), tuple(results)


def iter_instrs(body: Sequence[tuple]):
    for instr in body:
        yield instr
        op = instr[0]
        if op in ('block', 'loop'):
            yield from iter_instrs(instr[1])
        elif op == 'if':
            yield from iter_instrs(instr[1])
            yield from iter_instrs(instr[2])


# Text format

def _wat_sig(params, results) -> str:
    out = ''
    if params:
        out += ' (param ' + ' '.join(params) + ')'
    if results:
        out += ' (result ' + ' '.join(results) + ')'
    return out


def _const_text(value) -> str:
    if isinstance(value, float):
        if value != value:
            return 'nan'
        if value in (float('inf'), float('-inf')):
            return 'inf' if value > 0 else '-inf'
        return float.hex(value)
    return str(value)


def _wat_instrs(body, indent: int, types: List[Sig]) -> List[str]:
    pad = '  ' * indent
    lines = []
    for instr in body:
        op = instr[0]
        if op in ('block', 'loop'):
            lines.append(f'{pad}{op}')
            lines += _wat_instrs(instr[1], indent + 1, types)
            lines.append(f'{pad}end')
        elif op == 'if':
            lines.append(f'{pad}if')
            lines += _wat_instrs(instr[1], indent + 1, types)
            if instr[2]:
                lines.append(f'{pad}else')
                lines += _wat_instrs(instr[2], indent + 1, types)
            lines.append(f'{pad}end')
        elif op == 'br_table':
            lines.append(f'{pad}br_table ' + ' '.join(str(t) for t in instr[1]) + f' {instr[2]}')
        elif op == 'call_indirect':
            lines.append(f'{pad}call_indirect (type {types.index(_sig(instr[1]))})')
        elif op.endswith('.const'):
            lines.append(f'{pad}{op} {_const_text(instr[1])}')
        elif op.endswith(('.load', '.store')):
            offset = f' offset={instr[1]}' if len(instr) > 1 and instr[1] else ''
            lines.append(f'{pad}{op}{offset}')
        elif len(instr) > 1:
            lines.append(f'{pad}{op} ' + ' '.join(str(a) for a in instr[1:]))
        else:
            lines.append(f'{pad}{op}')
    return lines


def emit_wat(w: WasmModule) -> str:
    """Renders a module in the standard WebAssembly text format."""
    types = w.types()
    lines = []
    for i, (params, results) in enumerate(types):
        lines.append(f'  (type (;{i};) (func{_wat_sig(params, results)}))')
    for imp in w.imports:
        lines.append(f'  (import "{imp.module}" "{imp.name}" (func (type {types.index(imp.sig)})))')
    for i, f in enumerate(w.funcs):
        index = len(w.imports) + i
        head = f'  (func (;{index};) (type {types.index(f.sig)}){_wat_sig(f.params, f.results)}'
        lines.append(head)
        if f.locals:
            lines.append('    (local ' + ' '.join(f.locals) + ')')
        lines += _wat_instrs(f.body, 2, types)
        lines[-1] += ')'
    if w.table:
        lines.append(f'  (table (;0;) {len(w.table)} {len(w.table)} funcref)')
    if w.memory is not None:
        lines.append(f'  (memory (;0;) {w.memory[0]} {w.memory[1]})')
    for i, g in enumerate(w.globals):
        kind = f'(mut {g.valtype})' if g.mutable else g.valtype
        lines.append(f'  (global (;{i};) {kind} ({g.valtype}.const {_const_text(g.init)}))')
    for name, kind, index in w.exports():
        lines.append(f'  (export "{name}" ({kind} {index}))')
    if w.start is not None:
        lines.append(f'  (start {w.start})')
    if w.table:
        lines.append('  (elem (;0;) (i32.const 0) func ' + ' '.join(str(i) for i in w.table) + ')')
    for offset, payload in w.data:
        text = ''.join(f'\\{b:02x}' for b in payload)
        lines.append(f'  (data (;0;) (i32.const {offset}) "{text}")')
    if not lines:
        return '(module)\n'
    return '(module\n' + '\n'.join(lines) + ')\n'


# Binary format

_SIMPLE_OPCODES = {
    'unreachable': 0x00, 'nop': 0x01, 'return': 0x0F, 'drop': 0x1A, 'select': 0x1B,
    'i32.eqz': 0x45, 'i32.eq': 0x46, 'i32.ne': 0x47, 'i32.lt_s': 0x48, 'i32.lt_u': 0x49, 'i32.gt_s': 0x4A,
    'i32.gt_u': 0x4B, 'i32.le_s': 0x4C, 'i32.le_u': 0x4D, 'i32.ge_s': 0x4E, 'i32.ge_u': 0x4F,
    'i64.eqz': 0x50, 'i64.eq': 0x51, 'i64.ne': 0x52, 'i64.lt_s': 0x53, 'i64.lt_u': 0x54, 'i64.gt_s': 0x55,
    'i64.gt_u': 0x56, 'i64.le_s': 0x57, 'i64.le_u': 0x58, 'i64.ge_s': 0x59, 'i64.ge_u': 0x5A,
    'f32.eq': 0x5B, 'f32.ne': 0x5C, 'f32.lt': 0x5D, 'f32.gt': 0x5E, 'f32.le': 0x5F, 'f32.ge': 0x60,
    'f64.eq': 0x61, 'f64.ne': 0x62, 'f64.lt': 0x63, 'f64.gt': 0x64, 'f64.le': 0x65, 'f64.ge': 0x66,
    'i32.clz': 0x67, 'i32.ctz': 0x68, 'i32.popcnt': 0x69, 'i32.add': 0x6A, 'i32.sub': 0x6B, 'i32.mul': 0x6C,
    'i32.div_s': 0x6D, 'i32.div_u': 0x6E, 'i32.rem_s': 0x6F, 'i32.rem_u': 0x70, 'i32.and': 0x71, 'i32.or': 0x72,
    'i32.xor': 0x73, 'i32.shl': 0x74, 'i32.shr_s': 0x75, 'i32.shr_u': 0x76,
    'i64.clz': 0x79, 'i64.ctz': 0x7A, 'i64.popcnt': 0x7B, 'i64.add': 0x7C, 'i64.sub': 0x7D, 'i64.mul': 0x7E,
    'i64.div_s': 0x7F, 'i64.div_u': 0x80, 'i64.rem_s': 0x81, 'i64.rem_u': 0x82, 'i64.and': 0x83, 'i64.or': 0x84,
    'i64.xor': 0x85, 'i64.shl': 0x86, 'i64.shr_s': 0x87, 'i64.shr_u': 0x88,
    'f32.abs': 0x8B, 'f32.neg': 0x8C, 'f32.sqrt': 0x91, 'f32.add': 0x92, 'f32.sub': 0x93, 'f32.mul': 0x94,
    'f32.div': 0x95, 'f32.min': 0x96, 'f32.max': 0x97,
    'f64.abs': 0x99, 'f64.neg': 0x9A, 'f64.sqrt': 0x9F, 'f64.add': 0xA0, 'f64.sub': 0xA1, 'f64.mul': 0xA2,
    'f64.div': 0xA3, 'f64.min': 0xA4, 'f64.max': 0xA5,
    'i32.wrap_i64': 0xA7, 'i32.trunc_f32_s': 0xA8, 'i32.trunc_f32_u': 0xA9, 'i32.trunc_f64_s': 0xAA,
    'i32.trunc_f64_u': 0xAB, 'i64.extend_i32_s': 0xAC, 'i64.extend_i32_u': 0xAD, 'i64.trunc_f32_s': 0xAE,
    'i64.trunc_f32_u': 0xAF, 'i64.trunc_f64_s': 0xB0, 'i64.trunc_f64_u': 0xB1, 'f32.convert_i32_s': 0xB2,
    'f32.convert_i32_u': 0xB3, 'f32.convert_i64_s': 0xB4, 'f32.convert_i64_u': 0xB5, 'f32.demote_f64': 0xB6,
    'f64.convert_i32_s': 0xB7, 'f64.convert_i32_u': 0xB8, 'f64.convert_i64_s': 0xB9, 'f64.convert_i64_u': 0xBA,
    'f64.promote_f32': 0xBB, 'i32.reinterpret_f32': 0xBC, 'i64.reinterpret_f64': 0xBD,
    'f32.reinterpret_i32': 0xBE, 'f64.reinterpret_i64': 0xBF,
}

_MEMORY_OPCODES = {'i32.load': (0x28, 2), 'i64.load': (0x29, 3), 'f32.load': (0x2A, 2), 'f64.load': (0x2B, 3),
                   'i32.store': (0x36, 2), 'i64.store': (0x37, 3), 'f32.store': (0x38, 2),
                   'f64.store': (0x39, 3)}

_INDEX_OPCODES = {'br': 0x0C, 'br_if': 0x0D, 'call': 0x10, 'local.get': 0x20, 'local.set': 0x21,
                  'local.tee': 0x22, 'global.get': 0x23, 'global.set': 0x24}


def _u(n: int) -> bytes:
    return leb128.u.encode(n)


def _i(n: int) -> bytes:
    return leb128.i.encode(n)


def _vec(items: Sequence[bytes]) -> bytes:
    return _u(len(items)) + b''.join(items)


def _name(s: str) -> bytes:
    raw = s.encode('utf-8')
    return _u(len(raw)) + raw


def _functype(sig: Sig) -> bytes:
    params, results = sig
    return b'\x60' + _vec([bytes([_VALTYPE_CODES[t]]) for t in params]) + \
        _vec([bytes([_VALTYPE_CODES[t]]) for t in results])


def _encode_const(op: str, value) -> bytes:
    if op == 'i32.const':
        return b'\x41' + _i(int(np.array(value & 0xFFFFFFFF, dtype=np.uint64).astype(np.int32)))
    if op == 'i64.const':
        return b'\x42' + _i(int(np.array(value & 0xFFFFFFFFFFFFFFFF, dtype=np.uint64).astype(np.int64)))
    if op == 'f32.const':
        return b'\x43' + np.array([value], dtype='<f4').tobytes()
    return b'\x44' + np.array([value], dtype='<f8').tobytes()


def _encode_body(body, types: List[Sig]) -> bytes:
    out = bytearray()
    for instr in body:
        op = instr[0]
        if op in ('block', 'loop'):
            out += bytes([0x02 if op == 'block' else 0x03, 0x40]) + _encode_body(instr[1], types) + b'\x0B'
        elif op == 'if':
            out += b'\x04\x40' + _encode_body(instr[1], types)
            if instr[2]:
                out += b'\x05' + _encode_body(instr[2], types)
            out += b'\x0B'
        elif op == 'br_table':
            out += b'\x0E' + _vec([_u(t) for t in instr[1]]) + _u(instr[2])
        elif op == 'call_indirect':
            out += b'\x11' + _u(types.index(_sig(instr[1]))) + b'\x00'
        elif op.endswith('.const'):
            out += _encode_const(op, instr[1])
        elif op in _MEMORY_OPCODES:
            code, align = _MEMORY_OPCODES[op]
            out += bytes([code]) + _u(align) + _u(instr[1] if len(instr) > 1 else 0)
        elif op in _INDEX_OPCODES:
            out += bytes([_INDEX_OPCODES[op]]) + _u(instr[1])
        elif op == 'memory.size':
            out += b'\x3F\x00'
        elif op == 'memory.grow':
            out += b'\x40\x00'
        else:
            out += bytes([_SIMPLE_OPCODES[op]])
    return bytes(out)


def _section(code: int, payload: bytes) -> bytes:
    return bytes([code]) + _u(len(payload)) + payload


def emit_wasm_binary(w: WasmModule) -> bytes:
    """Encodes a module in the standard binary format."""
    types = w.types()
    out = bytearray(b'\x00asm\x01\x00\x00\x00')
    if types:
        out += _section(1, _vec([_functype(t) for t in types]))
    if w.imports:
        out += _section(2, _vec([_name(i.module) + _name(i.name) + b'\x00' + _u(types.index(i.sig))
                                 for i in w.imports]))
    if w.funcs:
        out += _section(3, _vec([_u(types.index(f.sig)) for f in w.funcs]))
    if w.table:
        out += _section(4, _vec([b'\x70\x01' + _u(len(w.table)) + _u(len(w.table))]))
    if w.memory is not None:
        out += _section(5, _vec([b'\x01' + _u(w.memory[0]) + _u(w.memory[1])]))
    if w.globals:
        out += _section(6, _vec([bytes([_VALTYPE_CODES[g.valtype], int(g.mutable)]) +
                                 _encode_const(f'{g.valtype}.const', g.init) + b'\x0B' for g in w.globals]))
    exports = w.exports()
    if exports:
        kinds = {'func': 0, 'table': 1, 'memory': 2, 'global': 3}
        out += _section(7, _vec([_name(n) + bytes([kinds[k]]) + _u(i) for n, k, i in exports]))
    if w.start is not None:
        out += _section(8, _u(w.start))
    if w.table:
        out += _section(9, _vec([b'\x00\x41\x00\x0B' + _vec([_u(i) for i in w.table])]))
    if w.funcs:
        bodies = []
        for f in w.funcs:
            groups = []
            for t in f.locals:
                if groups and groups[-1][1] == t:
                    groups[-1][0] += 1
                else:
                    groups.append([1, t])
            local_decls = _vec([_u(n) + bytes([_VALTYPE_CODES[t]]) for n, t in groups])
            code = local_decls + _encode_body(f.body, types) + b'\x0B'
            bodies.append(_u(len(code)) + code)
        out += _section(10, _vec(bodies))
    if w.data:
        out += _section(11, _vec([b'\x00\x41' + _i(offset) + b'\x0B' + _u(len(payload)) + payload
                                  for offset, payload in w.data]))
    return bytes(out)
