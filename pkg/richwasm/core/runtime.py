"""The runtime linked into every lowered module: a first-fit free-list allocator over the single Wasm memory and a
mark-and-sweep collector for unrestricted blocks.

Memory map (bytes)::

    [0, 16)         reserved; address 0 is the null / exhaustion sentinel
    [16, 272)       relayout scratch
    [272, 528)      indirect-call argument area, 8 slots of 32 bytes
    [528, 4624)     root array, 1024 words
    [4624, 8192)    layout-descriptor table, 12 bytes per allocation site
    [8192, ...)     heap

Every heap block starts with an 8-byte header ``(size, info)``; ``size`` counts payload bytes and is a multiple of 8.
``info`` bit 0 marks a block in use, bit 1 an unrestricted block, bit 2 the collector's mark, and bits 8 and up hold
the allocation-site id. Free blocks form an address-ordered list threaded through the first payload word.

A layout descriptor ``(mask, period, skip)`` says which payload words may hold heap addresses: word ``i >= skip`` is
scanned when bit ``(i - skip) % period`` of ``mask`` is set. A period of 0 means the block holds no addresses.
"""
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from richwasm.core.wasm import PAGE, WasmFunc, WasmGlobal

RESERVED_END = 16
SCRATCH = 16
SCRATCH_BYTES = 256
ARG_AREA = 272
ARG_SLOT_BYTES = 32
ARG_SLOTS = 8
ROOTS = 528
ROOT_WORDS = 1024
ROOTS_END = ROOTS + 4 * ROOT_WORDS
LAYOUTS = 4624
LAYOUT_ENTRY = 12
HEAP_BASE = 8192
MAX_SITES = (HEAP_BASE - LAYOUTS) // LAYOUT_ENTRY

INITIAL_PAGES = 2
MAX_PAGES = 16
HEADER = 8

IN_USE = 1
UNRESTRICTED = 2
MARK = 4
SITE_SHIFT = 8

# Wasm globals owned by the runtime; lowered globals are numbered after them.
HEAP_TOP = 0
FREE_HEAD = 1
ROOT_TOP = 2
RUNTIME_GLOBALS = 3

RUNTIME_FUNCS = ('rw_alloc', 'rw_free', 'rw_collect', 'rw_root_push', 'rw_root_pop', 'rw_find', 'rw_mark',
                 'rw_scan')
EXPORTED_FUNCS = ('rw_alloc', 'rw_free', 'rw_collect', 'rw_root_push', 'rw_root_pop')


@dataclass(frozen=True)
class LayoutDescriptor:
    mask: int = 0
    period: int = 0
    skip: int = 0

    def encode(self) -> bytes:
        return np.array([self.mask & 0xFFFFFFFF, self.period, self.skip], dtype='<u4').tobytes()


NO_ADDRESSES = LayoutDescriptor()
ALL_ADDRESSES = LayoutDescriptor(0xFFFFFFFF, 32, 0)


def get(i):
    return ('local.get', i)


def set_(i):
    return ('local.set', i)


def const(v):
    return ('i32.const', v)


def load(offset=0):
    return ('i32.load', offset)


def store(offset=0):
    return ('i32.store', offset)


def block(*body):
    return ('block', list(body))


def loop(*body):
    return ('loop', list(body))


def if_(then, else_=()):
    return ('if', list(then), list(else_))


def op(name):
    return (name,)


def _next_block(h: int) -> List[tuple]:
    """Pushes the header address following the block at local ``h``."""
    return [get(h), get(h), load(0), op('i32.add'), const(HEADER), op('i32.add')]


def runtime_globals() -> List[WasmGlobal]:
    return [WasmGlobal('i32', True, HEAP_BASE),
            WasmGlobal('i32', True, 0),
            WasmGlobal('i32', True, ROOTS)]


def runtime_funcs(base: int) -> List[WasmFunc]:
    """The runtime functions, assuming the first of them gets function index ``base``."""
    index = {name: base + i for i, name in enumerate(RUNTIME_FUNCS)}
    gg = lambda g: ('global.get', g)
    gs = lambda g: ('global.set', g)
    call = lambda name: ('call', index[name])
    max_bytes = MAX_PAGES * PAGE

    # rw_alloc(bytes, info) -> payload address or 0
    size, prev, cur, csize, rest, tries, nxt = range(2, 9)
    alloc_body = [
        get(0), const(max_bytes), op('i32.gt_u'), if_([const(0), op('return')]),
        get(0), const(7), op('i32.add'), const(-8), op('i32.and'), set_(size),
        get(size), const(8), op('i32.lt_u'), if_([const(8), set_(size)]),
        const(0), set_(tries),
        loop(
            const(0), set_(prev),
            gg(FREE_HEAD), set_(cur),
            block(loop(
                get(cur), op('i32.eqz'), ('br_if', 1),
                get(cur), load(0), set_(csize),
                get(csize), get(size), op('i32.ge_u'),
                if_([
                    get(csize), get(size), op('i32.sub'), const(2 * HEADER), op('i32.ge_u'),
                    if_([get(cur), const(HEADER), op('i32.add'), get(size), op('i32.add'), set_(rest),
                         get(rest), get(csize), get(size), op('i32.sub'), const(HEADER), op('i32.sub'), store(0),
                         get(rest), const(0), store(4),
                         get(rest), get(cur), load(8), store(8),
                         get(cur), get(size), store(0),
                         get(rest), set_(nxt)],
                        [get(cur), load(8), set_(nxt)]),
                    get(prev), op('i32.eqz'),
                    if_([get(nxt), gs(FREE_HEAD)],
                        [get(prev), get(nxt), store(8)]),
                    get(cur), get(1), const(IN_USE), op('i32.or'), store(4),
                    get(cur), const(HEADER), op('i32.add'), op('return')]),
                get(cur), set_(prev),
                get(cur), load(8), set_(cur),
                ('br', 0))),
            gg(HEAP_TOP), const(HEADER), op('i32.add'), get(size), op('i32.add'), set_(rest),
            get(rest), ('memory.size',), const(16), op('i32.shl'), op('i32.gt_u'),
            if_([get(rest), ('memory.size',), const(16), op('i32.shl'), op('i32.sub'),
                 const(PAGE - 1), op('i32.add'), const(16), op('i32.shr_u'),
                 ('memory.grow',), const(-1), op('i32.eq'),
                 if_([get(tries), if_([const(0), op('return')]),
                      const(1), set_(tries),
                      call('rw_collect'), op('drop'),
                      ('br', 2)])]),
            gg(HEAP_TOP), set_(cur),
            get(cur), get(size), store(0),
            get(cur), get(1), const(IN_USE), op('i32.or'), store(4),
            get(rest), gs(HEAP_TOP),
            get(cur), const(HEADER), op('i32.add'), op('return')),
        const(0)]

    # rw_free(address)
    h, prev, cur = 1, 2, 3
    free_body = [
        get(0), op('i32.eqz'), if_([op('return')]),
        get(0), const(HEADER), op('i32.sub'), set_(h),
        get(h), const(0), store(4),
        const(0), set_(prev),
        gg(FREE_HEAD), set_(cur),
        block(loop(
            get(cur), op('i32.eqz'), ('br_if', 1),
            get(cur), get(h), op('i32.ge_u'), ('br_if', 1),
            get(cur), set_(prev),
            get(cur), load(8), set_(cur),
            ('br', 0))),
        get(h), get(cur), store(8),
        get(prev), op('i32.eqz'),
        if_([get(h), gs(FREE_HEAD)], [get(prev), get(h), store(8)]),
        get(cur),
        if_([*_next_block(h), get(cur), op('i32.eq'),
             if_([get(h), get(h), load(0), const(HEADER), op('i32.add'), get(cur), load(0), op('i32.add'),
                  store(0),
                  get(h), get(cur), load(8), store(8)])]),
        get(prev),
        if_([*_next_block(prev), get(h), op('i32.eq'),
             if_([get(prev), get(prev), load(0), const(HEADER), op('i32.add'), get(h), load(0), op('i32.add'),
                  store(0),
                  get(prev), get(h), load(8), store(8)])])]

    # rw_find(address) -> header of the in-use block whose payload starts at address, or 0
    h = 1
    find_body = [
        get(0), const(HEAP_BASE + HEADER), op('i32.lt_u'), if_([const(0), op('return')]),
        get(0), gg(HEAP_TOP), op('i32.ge_u'), if_([const(0), op('return')]),
        get(0), const(7), op('i32.and'), if_([const(0), op('return')]),
        const(HEAP_BASE), set_(h),
        block(loop(
            get(h), gg(HEAP_TOP), op('i32.ge_u'), ('br_if', 1),
            get(h), const(HEADER), op('i32.add'), get(0), op('i32.eq'),
            if_([get(h), load(4), const(IN_USE), op('i32.and'),
                 if_([get(h), op('return')]),
                 const(0), op('return')]),
            get(h), const(HEADER), op('i32.add'), get(0), op('i32.gt_u'), ('br_if', 1),
            *_next_block(h), set_(h),
            ('br', 0))),
        const(0)]

    # rw_mark(address) -> 1 when an unrestricted block was newly marked
    h, info = 1, 2
    mark_body = [
        get(0), call('rw_find'), set_(h),
        get(h), op('i32.eqz'), if_([const(0), op('return')]),
        get(h), load(4), set_(info),
        get(info), const(UNRESTRICTED), op('i32.and'), op('i32.eqz'), if_([const(0), op('return')]),
        get(info), const(MARK), op('i32.and'), if_([const(0), op('return')]),
        get(h), get(info), const(MARK), op('i32.or'), store(4),
        const(1)]

    # rw_scan(header) -> 1 when marking through the block's address words marked anything new
    site, mask, period, skip, i, n, changed, entry = range(1, 9)
    scan_body = [
        get(0), load(4), const(SITE_SHIFT), op('i32.shr_u'), set_(site),
        get(site), const(LAYOUT_ENTRY), op('i32.mul'), const(LAYOUTS), op('i32.add'), set_(entry),
        get(entry), load(0), set_(mask),
        get(entry), load(4), set_(period),
        get(entry), load(8), set_(skip),
        get(period), op('i32.eqz'), if_([const(0), op('return')]),
        get(0), load(0), const(2), op('i32.shr_u'), set_(n),
        const(0), set_(i),
        const(0), set_(changed),
        block(loop(
            get(i), get(n), op('i32.ge_u'), ('br_if', 1),
            get(i), get(skip), op('i32.ge_u'),
            if_([get(mask), get(i), get(skip), op('i32.sub'), get(period), op('i32.rem_u'), op('i32.shr_u'),
                 const(1), op('i32.and'),
                 if_([get(0), const(HEADER), op('i32.add'), get(i), const(2), op('i32.shl'), op('i32.add'),
                      load(0), call('rw_mark'), get(changed), op('i32.or'), set_(changed)])]),
            get(i), const(1), op('i32.add'), set_(i),
            ('br', 0))),
        get(changed)]

    # rw_collect() -> number of blocks freed
    r, h, changed, nxt, info, freed = range(6)
    collect_body = [
        const(ROOTS), set_(r),
        block(loop(
            get(r), gg(ROOT_TOP), op('i32.ge_u'), ('br_if', 1),
            get(r), load(0), call('rw_mark'), op('drop'),
            get(r), const(4), op('i32.add'), set_(r),
            ('br', 0))),
        loop(
            const(0), set_(changed),
            const(HEAP_BASE), set_(h),
            block(loop(
                get(h), gg(HEAP_TOP), op('i32.ge_u'), ('br_if', 1),
                get(h), load(4), set_(info),
                get(info), const(IN_USE), op('i32.and'),
                if_([get(info), const(UNRESTRICTED), op('i32.and'), op('i32.eqz'),
                     get(info), const(MARK), op('i32.and'), op('i32.or'),
                     if_([get(h), call('rw_scan'), get(changed), op('i32.or'), set_(changed)])]),
                *_next_block(h), set_(h),
                ('br', 0))),
            get(changed), ('br_if', 0)),
        const(HEAP_BASE), set_(h),
        block(loop(
            get(h), gg(HEAP_TOP), op('i32.ge_u'), ('br_if', 1),
            *_next_block(h), set_(nxt),
            get(h), load(4), set_(info),
            get(info), const(IN_USE | UNRESTRICTED), op('i32.and'), const(IN_USE | UNRESTRICTED), op('i32.eq'),
            if_([get(info), const(MARK), op('i32.and'),
                 if_([get(h), get(info), const(~MARK), op('i32.and'), store(4)],
                     [get(h), const(HEADER), op('i32.add'), call('rw_free'),
                      get(freed), const(1), op('i32.add'), set_(freed)])]),
            get(nxt), set_(h),
            ('br', 0))),
        get(freed)]

    # rw_root_push(count) -> base of the reserved, zeroed root slots
    base, i = 1, 2
    push_body = [
        gg(ROOT_TOP), set_(base),
        get(base), get(0), const(2), op('i32.shl'), op('i32.add'), const(ROOTS_END), op('i32.gt_u'),
        if_([op('unreachable')]),
        const(0), set_(i),
        block(loop(
            get(i), get(0), op('i32.ge_u'), ('br_if', 1),
            get(base), get(i), const(2), op('i32.shl'), op('i32.add'), const(0), store(0),
            get(i), const(1), op('i32.add'), set_(i),
            ('br', 0))),
        get(base), get(0), const(2), op('i32.shl'), op('i32.add'), gs(ROOT_TOP),
        get(base)]

    pop_body = [gg(ROOT_TOP), get(0), const(2), op('i32.shl'), op('i32.sub'), gs(ROOT_TOP)]

    def export(name):
        return (name,) if name in EXPORTED_FUNCS else ()

    i32 = 'i32'
    return [WasmFunc('rw_alloc', (i32, i32), (i32,), [i32] * 7, alloc_body, export('rw_alloc')),
            WasmFunc('rw_free', (i32,), (), [i32] * 3, free_body, export('rw_free')),
            WasmFunc('rw_collect', (), (i32,), [i32] * 6, collect_body, export('rw_collect')),
            WasmFunc('rw_root_push', (i32,), (i32,), [i32] * 2, push_body, export('rw_root_push')),
            WasmFunc('rw_root_pop', (i32,), (), [], pop_body, export('rw_root_pop')),
            WasmFunc('rw_find', (i32,), (i32,), [i32], find_body),
            WasmFunc('rw_mark', (i32,), (i32,), [i32] * 2, mark_body),
            WasmFunc('rw_scan', (i32,), (i32,), [i32] * 8, scan_body)]


def layout_segment(descriptors: List[LayoutDescriptor]) -> Tuple[int, bytes]:
    """Data segment holding the layout-descriptor table; entry ``k`` describes allocation site ``k``."""
    assert len(descriptors) <= MAX_SITES, f'At most {MAX_SITES} allocation sites are supported.'
    return LAYOUTS, b''.join(d.encode() for d in descriptors)


def block_info(site: int, unrestricted: bool) -> int:
    return (site << SITE_SHIFT) | (UNRESTRICTED if unrestricted else 0)


def runtime_index(base: int) -> Dict[str, int]:
    return {name: base + i for i, name in enumerate(RUNTIME_FUNCS)}
