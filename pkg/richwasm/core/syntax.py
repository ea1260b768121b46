"""Reading and printing the ``.rwasm`` s-expression syntax.

Source is first read into plain s-expressions by a ply lexer/parser, then elaborated into the IR, resolving
``$names`` to de Bruijn indices. The printer regenerates names from binder depth, so printing is canonical.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

from ply import lex, yacc

from richwasm.core.ir import (Kind, QualConst, QualVar, UNR, LIN, SizeConst, SizeVar, SizePlus, LocVar, LocConst,
                              Mem, Priv, NumKind, Type, UnitT, NumT, ProdT, RefT, PtrT, CapT, OwnT, RecT, ExLocT,
                              CodeRefT, VarT, VariantHT, StructHT, ArrayHT, ExHT, LocQ, SizeQ, QualQ, TypeQ, FunType,
                              ArrowType, LocI, SizeI, QualI, PreTypeI, Const, UnitV, ProdV, RefV, PtrV, CapV, OwnV,
                              FoldV, MemPackV, CodeRefV, VariantHV, StructHV, ArrayHV, PackHV, Binop, Relop, Testop,
                              Unop, Convert, INT_BINOPS, FLOAT_BINOPS, RELOPS, INT_UNOPS, FLOAT_UNOPS, Unreachable,
                              Nop, Drop, Select, Block, Loop, Ite, Br, BrIf, BrTable, Return, GetLocal, SetLocal,
                              TeeLocal, GetGlobal, SetGlobal, Qualify, CodeRefI, Inst, CallIndirect, Call, RecFold,
                              RecUnfold, MemPack, MemUnpack, Group, Ungroup, CapSplit, CapJoin, RefDemote, RefSplit,
                              RefJoin, StructMalloc, StructFree, StructGet, StructSet, StructSwap, VariantMalloc,
                              VariantCase, ArrayMalloc, ArrayGet, ArraySet, ArrayFree, ExistPack, ExistUnpack, Trap,
                              CallClosure, Label, LocalFrame, Malloc, Free, Breaking, Returning, Func, FuncImport,
                              Global, GlobalImport, Table, RWModule)
from richwasm.util.utils import ParseError, SourceSpan, error

logger = logging.getLogger(__name__)

# Instruction position inside a function: alternating statement index and body number.
Path = Tuple[int, ...]


@dataclass
class SAtom:
    kind: str
    value: Union[str, int, float]
    span: SourceSpan


@dataclass
class SList:
    items: List[Union['SAtom', 'SList']]
    span: SourceSpan


class _SexpReader:
    tokens = ('LPAREN', 'RPAREN', 'ARROW', 'FLOAT', 'INT', 'STRING', 'NAME', 'SYMBOL', 'PLUS')

    t_ignore = ' \t\r'
    t_LPAREN = r'\('
    t_RPAREN = r'\)'
    t_PLUS = r'\+'

    def __init__(self, file: str):
        self.file = file
        self.lexer = lex.lex(module=self)
        self.parser = yacc.yacc(module=self, start='document', write_tables=False, debug=False,
                                errorlog=yacc.NullLogger())
        self.text = ''

    # Lexer

    def t_comment(self, t):
        r';;[^\n]*'
        pass

    def t_ARROW(self, t):
        r'->'
        return t

    def t_FLOAT(self, t):
        r'-?\d+(\.\d+)?[eE][-+]?\d+|-?\d+\.\d+|-?(inf|nan)\b'
        t.value = float(t.value)
        return t

    def t_INT(self, t):
        r'-?(0x[0-9a-fA-F]+|\d+)'
        t.value = int(t.value, 0)
        return t

    def t_STRING(self, t):
        r'"([^"\\]|\\.)*"'
        t.value = bytes(t.value[1:-1], 'utf-8').decode('unicode_escape')
        return t

    def t_NAME(self, t):
        r'\$[A-Za-z0-9_.\']+'
        return t

    def t_SYMBOL(self, t):
        r'[A-Za-z_][A-Za-z0-9_.]*'
        return t

    def t_newline(self, t):
        r'\n+'
        t.lexer.lineno += len(t.value)

    def t_error(self, t):
        raise ParseError([error('PAR001', f'unexpected character {t.value[0]!r}', self.span_at(t.lexpos))])

    # Grammar

    def p_document(self, p):
        """document : items"""
        p[0] = p[1]

    def p_items(self, p):
        """items : items sexp
                 | empty"""
        p[0] = p[1] + [p[2]] if len(p) == 3 else []

    def p_empty(self, p):
        """empty :"""
        p[0] = None

    def p_sexp_list(self, p):
        """sexp : LPAREN items RPAREN"""
        p[0] = SList(p[2], self.span_between(p.lexpos(1), p.lexpos(3) + 1))

    def p_sexp_atom(self, p):
        """sexp : ARROW
                | FLOAT
                | INT
                | STRING
                | NAME
                | SYMBOL
                | PLUS"""
        kind = p.slice[1].type
        end = p.lexpos(1) + len(str(p[1]))
        p[0] = SAtom(kind, p[1], self.span_between(p.lexpos(1), end))

    def p_error(self, p):
        if p is None:
            raise ParseError([error('PAR002', 'unexpected end of input', self.span_at(len(self.text)))])
        raise ParseError([error('PAR002', f'unexpected {p.value!r}', self.span_at(p.lexpos))])

    def span_at(self, pos: int) -> SourceSpan:
        return self.span_between(pos, pos)

    def span_between(self, start: int, end: int) -> SourceSpan:
        return SourceSpan(self.file, self._line_col(start), self._line_col(end))

    def _line_col(self, pos: int) -> Tuple[int, int]:
        line = self.text.count('\n', 0, pos) + 1
        column = pos - (self.text.rfind('\n', 0, pos) + 1) + 1
        return line, column

    def read(self, text: str) -> List[Union[SAtom, SList]]:
        self.text = text
        self.lexer.lineno = 1
        return self.parser.parse(text, lexer=self.lexer)


_READER = None


def read_sexps(text: str, file: str = '<input>') -> List[Union[SAtom, SList]]:
    global _READER
    if _READER is None:
        _READER = _SexpReader(file)
    _READER.file = file
    return _READER.read(text)


_QUANT_HEADS = ('loc', 'size', 'qual', 'type')
_NUM_KINDS = {k.value: k for k in NumKind}

_SIMPLE = {
    'nop': Nop, 'unreachable': Unreachable, 'drop': Drop, 'select': Select, 'return': Return, 'unit': UnitV,
    'call_indirect': CallIndirect, 'rec.unfold': RecUnfold, 'ungroup': Ungroup, 'cap.split': CapSplit,
    'cap.join': CapJoin, 'ref.demote': RefDemote, 'ref.split': RefSplit, 'ref.join': RefJoin,
    'struct.free': StructFree, 'array.get': ArrayGet, 'array.set': ArraySet, 'array.free': ArrayFree,
}
_SIMPLE_NAMES = {cls: name for name, cls in _SIMPLE.items()}


class _Elaborator:
    def __init__(self):
        self.scopes: Dict[Kind, List[Optional[str]]] = {k: [] for k in Kind}
        self.spans: Dict[Tuple[int, Path], SourceSpan] = {}
        self.func_index = 0

    # helpers

    def fail(self, code: str, message: str, node) -> None:
        raise ParseError([error(code, message, node.span)])

    def expect_list(self, node, head: str = None, min_len: int = 0) -> SList:
        if not isinstance(node, SList) or len(node.items) < min_len:
            self.fail('PAR004', f'expected a list{" (" + head + " ...)" if head else ""}', node)
        if head is not None and not self.is_head(node, head):
            self.fail('PAR004', f'expected ({head} ...)', node)
        return node

    @staticmethod
    def is_head(node, head: str) -> bool:
        return isinstance(node, SList) and len(node.items) > 0 and isinstance(node.items[0], SAtom) \
            and node.items[0].kind == 'SYMBOL' and node.items[0].value == head

    def expect_int(self, node) -> int:
        if not isinstance(node, SAtom) or node.kind != 'INT':
            self.fail('PAR004', 'expected an integer', node)
        return node.value

    def expect_symbol(self, node) -> str:
        if not isinstance(node, SAtom) or node.kind != 'SYMBOL':
            self.fail('PAR004', 'expected a keyword', node)
        return node.value

    def expect_name(self, node) -> str:
        if not isinstance(node, SAtom) or node.kind != 'NAME':
            self.fail('PAR004', 'expected a $name', node)
        return node.value

    def bind(self, kind: Kind, name: Optional[str]) -> None:
        self.scopes[kind].append(name)

    def unbind(self, kind: Kind, count: int = 1) -> None:
        for _ in range(count):
            self.scopes[kind].pop()

    def resolve(self, kind: Kind, node) -> int:
        name = self.expect_name(node)
        scope = self.scopes[kind]
        for depth, bound in enumerate(reversed(scope)):
            if bound == name:
                return depth
        self.fail('PAR003', f'unbound {kind.value} variable {name}', node)

    # qualifiers, sizes, locations

    def qual(self, node):
        if isinstance(node, SAtom) and node.kind == 'SYMBOL' and node.value in ('unr', 'lin'):
            return UNR if node.value == 'unr' else LIN
        return QualVar(self.resolve(Kind.QUAL, node))

    def size(self, node):
        if isinstance(node, SAtom) and node.kind == 'INT':
            if node.value < 0:
                self.fail('PAR004', 'sizes are non-negative', node)
            return SizeConst(node.value)
        if self.is_head(node, '+') or (isinstance(node, SList) and node.items and isinstance(node.items[0], SAtom)
                                       and node.items[0].kind == 'PLUS'):
            if len(node.items) != 3:
                self.fail('PAR004', '(+ SIZE SIZE) takes two sizes', node)
            return SizePlus(self.size(node.items[1]), self.size(node.items[2]))
        return SizeVar(self.resolve(Kind.SIZE, node))

    def loc(self, node):
        if isinstance(node, SList) and len(node.items) == 2 and isinstance(node.items[0], SAtom) \
                and node.items[0].value in ('lin', 'unr'):
            return LocConst(self.expect_int(node.items[1]), Mem(node.items[0].value))
        return LocVar(self.resolve(Kind.LOC, node))

    def priv(self, node) -> Priv:
        value = self.expect_symbol(node)
        if value not in ('rw', 'r'):
            self.fail('PAR004', 'expected rw or r', node)
        return Priv(value)

    # types

    def type(self, node) -> Type:
        lst = self.expect_list(node)
        if len(lst.items) != 2:
            self.fail('PAR004', 'a type is (PRETYPE QUAL)', node)
        return Type(self.pretype(lst.items[0]), self.qual(lst.items[1]))

    def types(self, node) -> Tuple[Type, ...]:
        return tuple(self.type(t) for t in self.expect_list(node).items)

    def pretype(self, node):
        if isinstance(node, SAtom):
            if node.kind == 'NAME':
                return VarT(self.resolve(Kind.TYPE, node))
            if node.value == 'unit':
                return UnitT()
            if node.value in _NUM_KINDS:
                return NumT(_NUM_KINDS[node.value])
            self.fail('PAR004', f'unknown pretype {node.value}', node)
        lst = self.expect_list(node, min_len=1)
        head = self.expect_symbol(lst.items[0])
        args = lst.items[1:]
        if head == 'prod':
            return ProdT(tuple(self.type(t) for t in args))
        if head in ('ref', 'cap'):
            self.arity(lst, 4)
            cls = RefT if head == 'ref' else CapT
            return cls(self.priv(args[0]), self.loc(args[1]), self.heap(args[2]))
        if head in ('ptr', 'own'):
            self.arity(lst, 2)
            return (PtrT if head == 'ptr' else OwnT)(self.loc(args[0]))
        if head == 'rec':
            self.arity(lst, 4)
            q = self.qual(args[1])
            self.bind(Kind.TYPE, self.expect_name(args[0]))
            body = self.type(args[2])
            self.unbind(Kind.TYPE)
            return RecT(q, body)
        if head == 'exloc':
            self.arity(lst, 3)
            self.bind(Kind.LOC, self.expect_name(args[0]))
            body = self.type(args[1])
            self.unbind(Kind.LOC)
            return ExLocT(body)
        if head == 'coderef':
            self.arity(lst, 2)
            return CodeRefT(self.funtype(args[0]))
        self.fail('PAR004', f'unknown pretype form {head}', node)

    def arity(self, lst: SList, n: int) -> None:
        if len(lst.items) != n:
            self.fail('PAR004', f'({lst.items[0].value} ...) takes {n - 1} arguments', lst)

    def heap(self, node):
        lst = self.expect_list(node, min_len=1)
        head = self.expect_symbol(lst.items[0])
        args = lst.items[1:]
        if head == 'variant':
            return VariantHT(tuple(self.type(t) for t in args))
        if head == 'struct':
            fields = []
            for f in args:
                f = self.expect_list(f)
                if len(f.items) != 2:
                    self.fail('PAR004', 'a struct field is (TYPE SIZE)', f)
                fields.append((self.type(f.items[0]), self.size(f.items[1])))
            return StructHT(tuple(fields))
        if head == 'array':
            self.arity(lst, 2)
            return ArrayHT(self.type(args[0]))
        if head == 'ex':
            self.arity(lst, 5)
            q, sz = self.qual(args[1]), self.size(args[2])
            self.bind(Kind.TYPE, self.expect_name(args[0]))
            body = self.type(args[3])
            self.unbind(Kind.TYPE)
            return ExHT(q, sz, body)
        self.fail('PAR004', f'unknown heap type {head}', node)

    def funtype(self, node) -> FunType:
        lst = self.expect_list(node, 'fn')
        items = lst.items[1:]
        quants = []
        bound = []
        while items and isinstance(items[0], SList) and items[0].items and isinstance(items[0].items[0], SAtom) \
                and items[0].items[0].value in _QUANT_HEADS:
            q, name = self.quantifier(items[0])
            quants.append(q)
            self.bind(q.kind, name)
            bound.append(q.kind)
            items = items[1:]
        if len(items) != 3 or not (isinstance(items[1], SAtom) and items[1].kind == 'ARROW'):
            self.fail('PAR004', 'a function type is (fn QUANT* (TYPE*) -> (TYPE*))', node)
        ins, outs = self.types(items[0]), self.types(items[2])
        for kind in reversed(bound):
            self.unbind(kind)
        return FunType(tuple(quants), ins, outs)

    def quantifier(self, node):
        head = node.items[0].value
        args = node.items[1:]
        if not args:
            self.fail('PAR004', f'({head} ...) needs a $name', node)
        name = self.expect_name(args[0])
        if head == 'loc':
            return LocQ(), name
        if head == 'type':
            if len(args) not in (3, 4):
                self.fail('PAR004', '(type $a QUAL SIZE cap?)', node)
            caps = len(args) == 4 and self.expect_symbol(args[3]) == 'cap'
            return TypeQ(self.qual(args[1]), self.size(args[2]), caps), name
        lower, upper = (), ()
        convert = self.size if head == 'size' else self.qual
        for bound in args[1:]:
            bound = self.expect_list(bound, min_len=1)
            which = self.expect_symbol(bound.items[0])
            values = tuple(convert(b) for b in bound.items[1:])
            if which == 'lower':
                lower = values
            elif which == 'upper':
                upper = values
            else:
                self.fail('PAR004', 'expected (lower ...) or (upper ...)', bound)
        return (SizeQ(lower, upper) if head == 'size' else QualQ(lower, upper)), name

    def arrow(self, node) -> ArrowType:
        lst = self.expect_list(node, 'arrow')
        self.arity(lst, 3)
        return ArrowType(self.types(lst.items[1]), self.types(lst.items[2]))

    def effect(self, node):
        lst = self.expect_list(node, 'effect')
        entries = []
        for e in lst.items[1:]:
            e = self.expect_list(e)
            if len(e.items) != 2:
                self.fail('PAR004', 'an effect entry is (INT TYPE)', e)
            entries.append((self.expect_int(e.items[0]), self.type(e.items[1])))
        return tuple(entries)

    def index(self, node):
        lst = self.expect_list(node, min_len=2)
        head = self.expect_symbol(lst.items[0])
        if head == 'loc':
            return LocI(self.loc(lst.items[1]))
        if head == 'size':
            return SizeI(self.size(lst.items[1]))
        if head == 'qual':
            return QualI(self.qual(lst.items[1]))
        if head == 'pretype':
            return PreTypeI(self.pretype(lst.items[1]))
        self.fail('PAR004', f'unknown index form {head}', node)

    # instructions

    def instrs(self, nodes, path: Path) -> Tuple:
        out = []
        for i, node in enumerate(nodes):
            here = path + (i,)
            self.spans[(self.func_index, here)] = node.span
            out.append(self.instr(node, here))
        return tuple(out)

    def instr(self, node, path: Path):
        if isinstance(node, SAtom):
            if node.kind != 'SYMBOL':
                self.fail('PAR004', f'expected an instruction, got {node.value!r}', node)
            if node.value in _SIMPLE:
                return _SIMPLE[node.value]()
            return self.numeric(node)
        lst = self.expect_list(node, min_len=1)
        head = self.expect_symbol(lst.items[0])
        args = lst.items[1:]
        if head.endswith('.const') and head[:-6] in _NUM_KINDS:
            self.arity(lst, 2)
            num = _NUM_KINDS[head[:-6]]
            value = args[0].value if isinstance(args[0], SAtom) else None
            if not isinstance(value, (int, float)) or (not num.is_float and isinstance(value, float)):
                self.fail('PAR004', f'bad constant for {num.value}', args[0])
            return Const(num, float(value) if num.is_float else value)
        if head == 'cvt':
            self.arity(lst, 3)
            return Convert(self.num_kind(args[0]), self.num_kind(args[1]))
        if head in ('br', 'br_if'):
            self.arity(lst, 2)
            return (Br if head == 'br' else BrIf)(self.expect_int(args[0]))
        if head == 'br_table':
            if not args:
                self.fail('PAR004', 'br_table needs at least a default target', node)
            targets = tuple(self.expect_int(a) for a in args)
            return BrTable(targets[:-1], targets[-1])
        if head == 'get_local':
            self.arity(lst, 3)
            return GetLocal(self.expect_int(args[0]), self.qual(args[1]))
        simple_index = {'set_local': SetLocal, 'tee_local': TeeLocal, 'get_global': GetGlobal,
                        'set_global': SetGlobal, 'coderef': CodeRefI, 'struct.get': StructGet,
                        'struct.set': StructSet, 'struct.swap': StructSwap}
        if head in simple_index:
            self.arity(lst, 2)
            return simple_index[head](self.expect_int(args[0]))
        if head == 'qualify':
            self.arity(lst, 2)
            return Qualify(self.qual(args[0]))
        if head == 'inst':
            return Inst(tuple(self.index(a) for a in args))
        if head == 'call':
            if not args:
                self.fail('PAR004', 'call needs a function index', node)
            return Call(self.expect_int(args[0]), tuple(self.index(a) for a in args[1:]))
        if head == 'rec.fold':
            self.arity(lst, 2)
            return RecFold(self.pretype(args[0]))
        if head == 'mempack':
            self.arity(lst, 2)
            return MemPack(self.loc(args[0]))
        if head == 'group':
            self.arity(lst, 3)
            return Group(self.expect_int(args[0]), self.qual(args[1]))
        if head == 'struct.malloc':
            self.arity(lst, 3)
            sizes = self.expect_list(args[0], 'sizes')
            return StructMalloc(tuple(self.size(s) for s in sizes.items[1:]), self.qual(args[1]))
        if head == 'variant.malloc':
            self.arity(lst, 4)
            return VariantMalloc(self.expect_int(args[0]), self.types(args[1]), self.qual(args[2]))
        if head == 'array.malloc':
            self.arity(lst, 2)
            return ArrayMalloc(self.qual(args[0]))
        if head == 'exists.pack':
            self.arity(lst, 4)
            return ExistPack(self.pretype(args[0]), self.heap(args[1]), self.qual(args[2]))
        if head == 'block':
            if len(args) < 2:
                self.fail('PAR004', '(block ARROW EFFECT INSTR*)', node)
            return Block(self.arrow(args[0]), self.effect(args[1]), self.instrs(args[2:], path + (0,)))
        if head == 'loop':
            if len(args) < 1:
                self.fail('PAR004', '(loop ARROW INSTR*)', node)
            return Loop(self.arrow(args[0]), self.instrs(args[1:], path + (0,)))
        if head == 'ite':
            if len(args) != 4:
                self.fail('PAR004', '(ite ARROW EFFECT (then ...) (else ...))', node)
            then = self.expect_list(args[2], 'then')
            other = self.expect_list(args[3], 'else')
            return Ite(self.arrow(args[0]), self.effect(args[1]), self.instrs(then.items[1:], path + (0,)),
                       self.instrs(other.items[1:], path + (1,)))
        if head == 'memunpack':
            if len(args) < 3:
                self.fail('PAR004', '(memunpack $l ARROW EFFECT INSTR*)', node)
            name = self.expect_name(args[0])
            arrow, effect = self.arrow(args[1]), self.effect(args[2])
            self.bind(Kind.LOC, name)
            body = self.instrs(args[3:], path + (0,))
            self.unbind(Kind.LOC)
            return MemUnpack(arrow, effect, body)
        if head == 'variant.case':
            if len(args) < 4:
                self.fail('PAR004', '(variant.case QUAL HEAP ARROW EFFECT (case ...)*)', node)
            bodies = []
            for k, case in enumerate(args[4:]):
                case = self.expect_list(case, 'case')
                bodies.append(self.instrs(case.items[1:], path + (k,)))
            return VariantCase(self.qual(args[0]), self.heap(args[1]), self.arrow(args[2]), self.effect(args[3]),
                               tuple(bodies))
        if head == 'exists.unpack':
            if len(args) < 5:
                self.fail('PAR004', '(exists.unpack $a QUAL HEAP ARROW EFFECT INSTR*)', node)
            name = self.expect_name(args[0])
            q, heap, arrow, effect = self.qual(args[1]), self.heap(args[2]), self.arrow(args[3]), self.effect(args[4])
            self.bind(Kind.TYPE, name)
            body = self.instrs(args[5:], path + (0,))
            self.unbind(Kind.TYPE)
            return ExistUnpack(q, heap, arrow, effect, body)
        self.fail('PAR004', f'unknown instruction {head}', node)

    def num_kind(self, node) -> NumKind:
        value = self.expect_symbol(node)
        if value not in _NUM_KINDS:
            self.fail('PAR004', f'unknown numeric kind {value}', node)
        return _NUM_KINDS[value]

    def numeric(self, node):
        kind_name, _, op = node.value.partition('.')
        if kind_name not in _NUM_KINDS or not op:
            self.fail('PAR004', f'unknown instruction {node.value}', node)
        num = _NUM_KINDS[kind_name]
        if op == 'eqz' and not num.is_float:
            return Testop(num, 'eqz')
        if op in RELOPS:
            return Relop(num, op)
        if op in (FLOAT_BINOPS if num.is_float else INT_BINOPS):
            return Binop(num, op)
        if op in (FLOAT_UNOPS if num.is_float else INT_UNOPS):
            return Unop(num, op)
        self.fail('PAR004', f'unknown instruction {node.value}', node)

    # module fields

    def exports(self, items):
        names = []
        while items and self.is_head(items[0], 'export'):
            lst = items[0]
            if len(lst.items) != 2 or not isinstance(lst.items[1], SAtom) or lst.items[1].kind != 'STRING':
                self.fail('PAR004', '(export "name")', lst)
            names.append(lst.items[1].value)
            items = items[1:]
        return tuple(names), items

    def import_of(self, node) -> Tuple[str, str]:
        if len(node.items) != 3 or any(not isinstance(x, SAtom) or x.kind != 'STRING' for x in node.items[1:]):
            self.fail('PAR004', '(import "module" "name")', node)
        return node.items[1].value, node.items[2].value

    def func(self, node):
        exports, items = self.exports(node.items[1:])
        if items and self.is_head(items[0], 'import'):
            module, name = self.import_of(items[0])
            if len(items) != 2:
                self.fail('PAR004', '(func (import ...) FUNTYPE)', node)
            return FuncImport(module, name, self.funtype(items[1]), exports)
        if len(items) != 3:
            self.fail('PAR004', '(func (export ...)* FUNTYPE (locals ...) (body ...))', node)
        ft = self.funtype(items[0])
        for q, name in zip(ft.quants, self._quant_names(items[0])):
            self.bind(q.kind, name)
        locals_ = self.expect_list(items[1], 'locals')
        sizes = tuple(self.size(s) for s in locals_.items[1:])
        body = self.instrs(self.expect_list(items[2], 'body').items[1:], ())
        for q in reversed(ft.quants):
            self.unbind(q.kind)
        return Func(ft, sizes, body, exports)

    def _quant_names(self, node) -> List[str]:
        names = []
        for item in node.items[1:]:
            if isinstance(item, SList) and item.items and isinstance(item.items[0], SAtom) \
                    and item.items[0].value in _QUANT_HEADS:
                names.append(item.items[1].value)
            else:
                break
        return names

    def global_(self, node):
        exports, items = self.exports(node.items[1:])
        imported = None
        if items and self.is_head(items[0], 'import'):
            imported = self.import_of(items[0])
            items = items[1:]
        mutable = bool(items) and isinstance(items[0], SAtom) and items[0].value == 'mut'
        if mutable:
            items = items[1:]
        if imported is not None:
            if len(items) != 1:
                self.fail('PAR004', '(global (import ...) mut? PRETYPE)', node)
            return GlobalImport(imported[0], imported[1], mutable, self.pretype(items[0]), exports)
        if len(items) != 2:
            self.fail('PAR004', '(global (export ...)* mut? PRETYPE (init ...))', node)
        init = self.instrs(self.expect_list(items[1], 'init').items[1:], ())
        return Global(mutable, self.pretype(items[0]), init, exports)

    def module(self, node) -> RWModule:
        lst = self.expect_list(node, 'module')
        funcs, globals_, table = [], [], Table()
        for field in lst.items[1:]:
            if self.is_head(field, 'func'):
                self.func_index = len(funcs)
                funcs.append(self.func(field))
            elif self.is_head(field, 'global'):
                self.func_index = -1 - len(globals_)
                globals_.append(self.global_(field))
            elif self.is_head(field, 'table'):
                exports, items = self.exports(field.items[1:])
                table = Table(tuple(self.expect_int(i) for i in items), exports)
            else:
                self.fail('PAR004', 'expected func, global or table', field)
        return RWModule(tuple(funcs), tuple(globals_), table)


def parse_module_with_spans(text: str, file: str = '<input>'):
    """Parses a module and also returns the source span of every instruction.

    Returns
    -------
    module: RWModule
        The elaborated module.

    spans: Dict[Tuple[int, Path], SourceSpan]
        Keyed by (function index, instruction path); global initializers use negative indices -1, -2, ...
    """
    sexps = read_sexps(text, file)
    if len(sexps) != 1:
        span = sexps[1].span if len(sexps) > 1 else SourceSpan(file, (1, 1), (1, 1))
        raise ParseError([error('PAR002', 'expected exactly one (module ...)', span)])
    elaborator = _Elaborator()
    module = elaborator.module(sexps[0])
    logger.debug('parsed %s: %d functions, %d globals', file, len(module.funcs), len(module.globals))
    return module, elaborator.spans


def parse_module(text: str, file: str = '<input>') -> RWModule:
    return parse_module_with_spans(text, file)[0]


def parse_type(text: str) -> Type:
    return _Elaborator().type(read_sexps(text)[0])


def parse_instrs(text: str) -> Tuple:
    return _Elaborator().instrs(read_sexps(text), ())


# Printing

class _Printer:
    _PREFIX = {Kind.LOC: '$l', Kind.SIZE: '$s', Kind.QUAL: '$q', Kind.TYPE: '$t'}

    def __init__(self):
        self.depth = {k: 0 for k in Kind}

    def bind(self, kind: Kind) -> str:
        name = f'{self._PREFIX[kind]}{self.depth[kind]}'
        self.depth[kind] += 1
        return name

    def unbind(self, kind: Kind, count: int = 1) -> None:
        self.depth[kind] -= count

    def var(self, kind: Kind, index: int) -> str:
        level = self.depth[kind] - 1 - index
        return f'{self._PREFIX[kind]}{level}' if level >= 0 else f'{self._PREFIX[kind]}free{-level - 1}'

    def qual(self, q) -> str:
        return q.value if isinstance(q, QualConst) else self.var(Kind.QUAL, q.index)

    def size(self, s) -> str:
        if isinstance(s, SizeConst):
            return str(s.bits)
        if isinstance(s, SizeVar):
            return self.var(Kind.SIZE, s.index)
        return f'(+ {self.size(s.left)} {self.size(s.right)})'

    def loc(self, loc) -> str:
        if isinstance(loc, LocConst):
            return f'({loc.mem.value} {loc.address})'
        return self.var(Kind.LOC, loc.index)

    def type(self, t: Type) -> str:
        return f'({self.pretype(t.pre)} {self.qual(t.qual)})'

    def types(self, ts) -> str:
        return '(' + ' '.join(self.type(t) for t in ts) + ')'

    def pretype(self, p) -> str:
        if isinstance(p, UnitT):
            return 'unit'
        if isinstance(p, NumT):
            return p.num.value
        if isinstance(p, VarT):
            return self.var(Kind.TYPE, p.index)
        if isinstance(p, ProdT):
            return '(prod' + ''.join(' ' + self.type(t) for t in p.types) + ')'
        if isinstance(p, RefT):
            return f'(ref {p.priv.value} {self.loc(p.loc)} {self.heap(p.heap)})'
        if isinstance(p, CapT):
            return f'(cap {p.priv.value} {self.loc(p.loc)} {self.heap(p.heap)})'
        if isinstance(p, PtrT):
            return f'(ptr {self.loc(p.loc)})'
        if isinstance(p, OwnT):
            return f'(own {self.loc(p.loc)})'
        if isinstance(p, RecT):
            q = self.qual(p.qual)
            name = self.bind(Kind.TYPE)
            body = self.type(p.body)
            self.unbind(Kind.TYPE)
            return f'(rec {name} {q} {body})'
        if isinstance(p, ExLocT):
            name = self.bind(Kind.LOC)
            body = self.type(p.body)
            self.unbind(Kind.LOC)
            return f'(exloc {name} {body})'
        assert isinstance(p, CodeRefT), f'Not a pretype: {p}.'
        return f'(coderef {self.funtype(p.fun)})'

    def heap(self, h) -> str:
        if isinstance(h, VariantHT):
            return '(variant' + ''.join(' ' + self.type(t) for t in h.cases) + ')'
        if isinstance(h, StructHT):
            return '(struct' + ''.join(f' ({self.type(t)} {self.size(s)})' for t, s in h.fields) + ')'
        if isinstance(h, ArrayHT):
            return f'(array {self.type(h.elem)})'
        q, sz = self.qual(h.qual), self.size(h.size)
        name = self.bind(Kind.TYPE)
        body = self.type(h.body)
        self.unbind(Kind.TYPE)
        return f'(ex {name} {q} {sz} {body})'

    def quantifier(self, q) -> str:
        if isinstance(q, LocQ):
            return f'(loc {self.bind(Kind.LOC)})'
        if isinstance(q, TypeQ):
            qual, size = self.qual(q.qual), self.size(q.size)
            return f'(type {self.bind(Kind.TYPE)} {qual} {size}{" cap" if q.caps else ""})'
        show = self.size if isinstance(q, SizeQ) else self.qual
        bounds = ''
        if q.lower:
            bounds += ' (lower' + ''.join(' ' + show(b) for b in q.lower) + ')'
        if q.upper:
            bounds += ' (upper' + ''.join(' ' + show(b) for b in q.upper) + ')'
        return f'({"size" if isinstance(q, SizeQ) else "qual"} {self.bind(q.kind)}{bounds})'

    def funtype(self, ft: FunType, keep_bound: bool = False) -> str:
        quants = ''.join(self.quantifier(q) + ' ' for q in ft.quants)
        text = f'(fn {quants}{self.types(ft.ins)} -> {self.types(ft.outs)})'
        if not keep_bound:
            for q in ft.quants:
                self.unbind(q.kind)
        return text

    def arrow(self, a: ArrowType) -> str:
        return f'(arrow {self.types(a.ins)} {self.types(a.outs)})'

    def effect(self, effect) -> str:
        return '(effect' + ''.join(f' ({i} {self.type(t)})' for i, t in effect) + ')'

    def index(self, z) -> str:
        if isinstance(z, LocI):
            return f'(loc {self.loc(z.loc)})'
        if isinstance(z, SizeI):
            return f'(size {self.size(z.size)})'
        if isinstance(z, QualI):
            return f'(qual {self.qual(z.qual)})'
        return f'(pretype {self.pretype(z.pre)})'

    def value(self, v) -> str:
        if isinstance(v, Const):
            return f'({v.num.value}.const {v.value})'
        if isinstance(v, UnitV):
            return 'unit'
        if isinstance(v, ProdV):
            return '(tuple' + ''.join(' ' + self.value(x) for x in v.values) + ')'
        if isinstance(v, (RefV, PtrV, CapV, OwnV)):
            return f'({type(v).__name__[:-1].lower()} {self.loc(v.loc)})'
        if isinstance(v, FoldV):
            return f'(fold {self.value(v.value)})'
        if isinstance(v, MemPackV):
            return f'(mempack {self.loc(v.loc)} {self.value(v.value)})'
        assert isinstance(v, CodeRefV), f'Not a value: {v}.'
        return f'(coderef {v.inst} {v.index}' + ''.join(' ' + self.index(z) for z in v.indices) + ')'

    def heap_value(self, hv) -> str:
        if isinstance(hv, VariantHV):
            return f'(variant {hv.tag} {self.value(hv.value)})'
        if isinstance(hv, StructHV):
            return '(struct' + ''.join(' ' + self.value(v) for v in hv.values) + ')'
        if isinstance(hv, ArrayHV):
            return '(array' + ''.join(' ' + self.value(v) for v in hv.values) + ')'
        assert isinstance(hv, PackHV), f'Not a heap value: {hv}.'
        return f'(pack {self.pretype(hv.pre)} {self.value(hv.value)})'

    def instrs(self, instrs, indent: int) -> List[str]:
        lines = []
        for e in instrs:
            lines.extend(self.instr(e, indent))
        return lines

    def nested(self, head: str, instrs, indent: int) -> List[str]:
        pad = '  ' * indent
        body = self.instrs(instrs, indent + 1)
        if not body:
            return [f'{pad}{head})']
        return [f'{pad}{head}'] + body[:-1] + [body[-1] + ')']

    def instr(self, e, indent: int) -> List[str]:
        pad = '  ' * indent
        cls = type(e)
        if cls in _SIMPLE_NAMES:
            return [pad + _SIMPLE_NAMES[cls]]
        if cls in (Const, ProdV, RefV, PtrV, CapV, OwnV, FoldV, MemPackV, CodeRefV):
            return [pad + self.value(e)]
        if isinstance(e, Binop) or isinstance(e, Relop) or isinstance(e, Testop) or isinstance(e, Unop):
            return [f'{pad}{e.num.value}.{e.op}']
        if isinstance(e, Convert):
            return [f'{pad}(cvt {e.src.value} {e.dst.value})']
        if isinstance(e, (Br, BrIf)):
            return [f'{pad}({"br" if isinstance(e, Br) else "br_if"} {e.depth})']
        if isinstance(e, BrTable):
            return [f'{pad}(br_table' + ''.join(f' {t}' for t in e.targets + (e.default,)) + ')']
        if isinstance(e, GetLocal):
            return [f'{pad}(get_local {e.index} {self.qual(e.qual)})']
        named = {SetLocal: 'set_local', TeeLocal: 'tee_local', GetGlobal: 'get_global', SetGlobal: 'set_global',
                 CodeRefI: 'coderef', StructGet: 'struct.get', StructSet: 'struct.set', StructSwap: 'struct.swap'}
        if cls in named:
            return [f'{pad}({named[cls]} {e.index})']
        if isinstance(e, Qualify):
            return [f'{pad}(qualify {self.qual(e.qual)})']
        if isinstance(e, Inst):
            return [f'{pad}(inst' + ''.join(' ' + self.index(z) for z in e.indices) + ')']
        if isinstance(e, Call):
            return [f'{pad}(call {e.index}' + ''.join(' ' + self.index(z) for z in e.indices) + ')']
        if isinstance(e, RecFold):
            return [f'{pad}(rec.fold {self.pretype(e.pre)})']
        if isinstance(e, MemPack):
            return [f'{pad}(mempack {self.loc(e.loc)})']
        if isinstance(e, Group):
            return [f'{pad}(group {e.count} {self.qual(e.qual)})']
        if isinstance(e, StructMalloc):
            return [f'{pad}(struct.malloc (sizes' + ''.join(' ' + self.size(s) for s in e.sizes) +
                    f') {self.qual(e.qual)})']
        if isinstance(e, VariantMalloc):
            return [f'{pad}(variant.malloc {e.tag} {self.types(e.cases)} {self.qual(e.qual)})']
        if isinstance(e, ArrayMalloc):
            return [f'{pad}(array.malloc {self.qual(e.qual)})']
        if isinstance(e, ExistPack):
            return [f'{pad}(exists.pack {self.pretype(e.pre)} {self.heap(e.heap)} {self.qual(e.qual)})']
        if isinstance(e, Block):
            return self.nested(f'(block {self.arrow(e.arrow)} {self.effect(e.effect)}', e.body, indent)
        if isinstance(e, Loop):
            return self.nested(f'(loop {self.arrow(e.arrow)}', e.body, indent)
        if isinstance(e, Ite):
            lines = [f'{pad}(ite {self.arrow(e.arrow)} {self.effect(e.effect)}']
            lines += self.nested('(then', e.then, indent + 1)
            else_lines = self.nested('(else', e.else_, indent + 1)
            return lines + else_lines[:-1] + [else_lines[-1] + ')']
        if isinstance(e, MemUnpack):
            head = f'(memunpack {self._PREFIX[Kind.LOC]}{self.depth[Kind.LOC]} {self.arrow(e.arrow)} ' \
                   f'{self.effect(e.effect)}'
            self.bind(Kind.LOC)
            lines = self.nested(head, e.body, indent)
            self.unbind(Kind.LOC)
            return lines
        if isinstance(e, VariantCase):
            lines = [f'{pad}(variant.case {self.qual(e.qual)} {self.heap(e.heap)} {self.arrow(e.arrow)} '
                     f'{self.effect(e.effect)}']
            for body in e.bodies:
                lines += self.nested('(case', body, indent + 1)
            lines[-1] += ')'
            return lines
        if isinstance(e, ExistUnpack):
            head = f'(exists.unpack {self._PREFIX[Kind.TYPE]}{self.depth[Kind.TYPE]} {self.qual(e.qual)} ' \
                   f'{self.heap(e.heap)} {self.arrow(e.arrow)} {self.effect(e.effect)}'
            self.bind(Kind.TYPE)
            lines = self.nested(head, e.body, indent)
            self.unbind(Kind.TYPE)
            return lines
        return [pad + self.admin(e)]

    def admin(self, e) -> str:
        if isinstance(e, Trap):
            return 'trap'
        if isinstance(e, Free):
            return 'free'
        if isinstance(e, CallClosure):
            return f'(call_cl {e.inst} {e.index}' + ''.join(' ' + self.index(z) for z in e.indices) + ')'
        if isinstance(e, Malloc):
            return f'(malloc {self.size(e.size)} {self.heap_value(e.value)} {self.qual(e.qual)})'
        if isinstance(e, Label):
            return f'(label {e.arity} ...)'
        if isinstance(e, LocalFrame):
            return f'(frame {e.arity} {e.inst} ...)'
        if isinstance(e, Breaking):
            return f'(breaking {e.depth}' + ''.join(' ' + self.value(v) for v in e.values) + ')'
        if isinstance(e, Returning):
            return '(returning' + ''.join(' ' + self.value(v) for v in e.values) + ')'
        raise ValueError(f'Cannot print {e!r}.')

    def module(self, m: RWModule) -> str:
        lines = ['(module']
        for f in m.funcs:
            exports = ''.join(f' (export "{n}")' for n in f.exports)
            if isinstance(f, FuncImport):
                lines.append(f'  (func{exports} (import "{f.module}" "{f.name}") {self.funtype(f.type)})')
                continue
            lines.append(f'  (func{exports} {self.funtype(f.type, keep_bound=True)}')
            lines.append('    (locals' + ''.join(' ' + self.size(s) for s in f.locals) + ')')
            lines += self.nested('(body', f.body, 2)
            lines[-1] += ')'
            for q in f.type.quants:
                self.unbind(q.kind)
        for g in m.globals:
            exports = ''.join(f' (export "{n}")' for n in g.exports)
            mut = ' mut' if g.mutable else ''
            if isinstance(g, GlobalImport):
                lines.append(f'  (global{exports} (import "{g.module}" "{g.name}"){mut} {self.pretype(g.pre)})')
                continue
            lines.append(f'  (global{exports}{mut} {self.pretype(g.pre)}')
            lines += self.nested('(init', g.init, 2)
            lines[-1] += ')'
        if m.table.entries or m.table.exports:
            exports = ''.join(f' (export "{n}")' for n in m.table.exports)
            lines.append(f'  (table{exports}' + ''.join(f' {i}' for i in m.table.entries) + ')')
        lines[-1] += ')'
        return '\n'.join(lines) + '\n'


def print_module(m: RWModule) -> str:
    return _Printer().module(m)


def show_type(t) -> str:
    """Renders a type, pretype or heap type for diagnostics."""
    printer = _Printer()
    if isinstance(t, Type):
        return printer.type(t)
    if isinstance(t, (VariantHT, StructHT, ArrayHT, ExHT)):
        return printer.heap(t)
    if isinstance(t, FunType):
        return printer.funtype(t)
    return printer.pretype(t)


def show_instr(e) -> str:
    return ' '.join(line.strip() for line in _Printer().instr(e, 0))


def show_qual(q) -> str:
    return _Printer().qual(q)


def show_size(s) -> str:
    return _Printer().size(s)
