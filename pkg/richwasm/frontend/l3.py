"""Compiler from L³, a linear language with explicit capabilities and pointers, to RichWasm.

Every L³ type is linear unless banged. A location package ``exists l. Cap l T n * !Ptr l`` becomes a RichWasm
location existential over a linear capability and an unrestricted pointer; ``n`` counts 32-bit words, so the
struct behind it has one field of ``32 n`` bits. ``join``/``split`` convert that package to and from a linear
reference ``exists l. Ref l T n``, which is also how ML's ``(Ref T)^lin`` looks at the boundary.
"""
import logging
from dataclasses import dataclass, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

from ply import lex, yacc

from richwasm.core.constraints import size_const, size_of
from richwasm.core.ir import (Kind, UNR, LIN, Priv, NumKind, I32, SizeConst, LocVar, Type, UnitT, ProdT, RefT, PtrT,
                              CapT, ExLocT, CodeRefT, StructHT, FunType, ArrowType, Const, UnitV, Binop, Drop,
                              Qualify, CodeRefI, CallIndirect, Call, MemPack, MemUnpack, Group, Ungroup, RefSplit,
                              RefJoin, StructMalloc, StructSwap, StructFree, Func, FuncImport, Table, RWModule)
from richwasm.core.typecheck import check_module
from richwasm.frontend.emit import FunctionBuilder
from richwasm.util.utils import FrontendError, ParseError, SourceSpan, error

logger = logging.getLogger(__name__)


# Types

@dataclass(frozen=True)
class L3Unit:
    pass


@dataclass(frozen=True)
class L3Int:
    pass


@dataclass(frozen=True)
class Bang:
    inner: 'L3Type'


@dataclass(frozen=True)
class Tensor:
    left: 'L3Type'
    right: 'L3Type'


@dataclass(frozen=True)
class Lolli:
    dom: 'L3Type'
    cod: 'L3Type'


@dataclass(frozen=True)
class CapTy:
    loc: str
    elem: 'L3Type'
    words: int


@dataclass(frozen=True)
class PtrTy:
    loc: str


@dataclass(frozen=True)
class RefL3:
    loc: str
    elem: 'L3Type'
    words: int


@dataclass(frozen=True)
class ExistsTy:
    var: str
    body: 'L3Type'


L3Type = Union[L3Unit, L3Int, Bang, Tensor, Lolli, CapTy, PtrTy, RefL3, ExistsTy]


def _fail(code: str, message: str, span: Optional[SourceSpan] = None):
    raise FrontendError([error(code, message, span)])


def free_locs(t: L3Type) -> set:
    if isinstance(t, (CapTy, RefL3)):
        return {t.loc} | free_locs(t.elem)
    if isinstance(t, PtrTy):
        return {t.loc}
    if isinstance(t, ExistsTy):
        return free_locs(t.body) - {t.var}
    if isinstance(t, Bang):
        return free_locs(t.inner)
    if isinstance(t, Tensor):
        return free_locs(t.left) | free_locs(t.right)
    if isinstance(t, Lolli):
        return free_locs(t.dom) | free_locs(t.cod)
    return set()


def rename_loc(t: L3Type, old: str, new: str) -> L3Type:
    if isinstance(t, (CapTy, RefL3)):
        return replace(t, loc=new if t.loc == old else t.loc, elem=rename_loc(t.elem, old, new))
    if isinstance(t, PtrTy):
        return PtrTy(new if t.loc == old else t.loc)
    if isinstance(t, ExistsTy):
        return t if t.var == old else ExistsTy(t.var, rename_loc(t.body, old, new))
    if isinstance(t, Bang):
        return Bang(rename_loc(t.inner, old, new))
    if isinstance(t, Tensor):
        return Tensor(rename_loc(t.left, old, new), rename_loc(t.right, old, new))
    if isinstance(t, Lolli):
        return Lolli(rename_loc(t.dom, old, new), rename_loc(t.cod, old, new))
    return t


def show_l3_type(t: L3Type) -> str:
    if isinstance(t, L3Unit):
        return 'Unit'
    if isinstance(t, L3Int):
        return 'Int'
    if isinstance(t, Bang):
        return f'!{show_l3_type(t.inner)}'
    if isinstance(t, Tensor):
        return f'({show_l3_type(t.left)} * {show_l3_type(t.right)})'
    if isinstance(t, Lolli):
        return f'({show_l3_type(t.dom)} -o {show_l3_type(t.cod)})'
    if isinstance(t, CapTy):
        return f'Cap {t.loc} {show_l3_type(t.elem)} {t.words}'
    if isinstance(t, PtrTy):
        return f'Ptr {t.loc}'
    if isinstance(t, RefL3):
        return f'Ref {t.loc} {show_l3_type(t.elem)} {t.words}'
    return f'(exists {t.var}. {show_l3_type(t.body)})'


def rw_l3_type(t: L3Type, locs: Sequence[Optional[str]] = (), span=None) -> Type:
    """RichWasm type of an L³ type; ``locs`` names the location variables in scope, innermost first."""
    def loc(name: str) -> LocVar:
        if name not in locs:
            _fail('L3003', f'location {name} is not in scope', span)
        return LocVar(list(locs).index(name))

    def cell(elem: L3Type, words: int) -> StructHT:
        return StructHT(((rw_l3_type(elem, locs, span), SizeConst(32 * words)),))

    if isinstance(t, L3Unit):
        return Type(UnitT(), LIN)
    if isinstance(t, L3Int):
        return Type(I32, LIN)
    if isinstance(t, Bang):
        inner = rw_l3_type(t.inner, locs, span)
        if isinstance(inner.pre, (CapT, RefT, ExLocT)) or \
                (isinstance(inner.pre, ProdT) and any(c.qual != UNR for c in inner.pre.types)):
            _fail('L3003', f'{show_l3_type(t)} cannot be unrestricted', span)
        return Type(inner.pre, UNR)
    if isinstance(t, Tensor):
        return Type(ProdT((rw_l3_type(t.left, locs, span), rw_l3_type(t.right, locs, span))), LIN)
    if isinstance(t, Lolli):
        fun = FunType((), (rw_l3_type(t.dom, locs, span),), (rw_l3_type(t.cod, locs, span),))
        return Type(CodeRefT(fun), LIN)
    if isinstance(t, CapTy):
        return Type(CapT(Priv.RW, loc(t.loc), cell(t.elem, t.words)), LIN)
    if isinstance(t, PtrTy):
        return Type(PtrT(loc(t.loc)), LIN)
    if isinstance(t, RefL3):
        return Type(RefT(Priv.RW, loc(t.loc), cell(t.elem, t.words)), LIN)
    body = rw_l3_type(t.body, (t.var,) + tuple(locs), span)
    return Type(ExLocT(body), body.qual)


def _cap_package(var: str, elem: L3Type, words: int) -> ExistsTy:
    return ExistsTy(var, Tensor(CapTy(var, elem, words), Bang(PtrTy(var))))


# Terms

class Term:
    """Base of the L³ term nodes; ``ty`` is filled in by the type checker."""
    ty: Optional[L3Type] = None


@dataclass(eq=False)
class IntLit(Term):
    value: int
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class UnitLit(Term):
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class Var(Term):
    name: str
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class BangE(Term):
    value: Term
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class Let(Term):
    name: str
    value: Term
    body: Term
    banged: bool = False
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class LetPair(Term):
    left: str
    right: str
    value: Term
    body: Term
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class LetPack(Term):
    loc: str
    name: str
    value: Term
    body: Term
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class Pack(Term):
    loc: str
    value: Term
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class Pair(Term):
    left: Term
    right: Term
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class Seq(Term):
    first: Term
    second: Term
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class App(Term):
    fn: Term
    arg: Term
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class Plus(Term):
    left: Term
    right: Term
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class New(Term):
    value: Term
    words: int
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class Free(Term):
    value: Term
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class Swap(Term):
    target: Term
    value: Term
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class Join(Term):
    value: Term
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class Split(Term):
    value: Term
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class Dupl(Term):
    value: Term
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class DropE(Term):
    value: Term
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class L3Fun:
    name: str
    param: str
    ptype: L3Type
    rtype: L3Type
    body: Term
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class L3Import:
    module: str
    name: str
    type: Lolli
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class L3Program:
    items: List[Union[L3Fun, L3Import]]
    main: Optional[Term] = None
    file: str = '<input>'


# Parsing

class _L3Parser:
    keywords = {
        'let': 'LET', 'in': 'IN', 'fun': 'FUN', 'import': 'IMPORT', 'new': 'NEW', 'free': 'FREE', 'swap': 'SWAP',
        'join': 'JOIN', 'split': 'SPLIT', 'dupl': 'DUPL', 'drop': 'DROP', 'pack': 'PACK', 'exists': 'EXISTS',
        'Unit': 'UNITT', 'Int': 'INTT', 'Cap': 'CAPT', 'Ptr': 'PTRT', 'Ref': 'REFT',
    }
    tokens = ('INT', 'ID', 'LPAREN', 'RPAREN', 'COMMA', 'DSEMI', 'SEMI', 'COLON', 'EQ', 'LT', 'GT', 'PLUS', 'BANG',
              'DOT', 'TENSOR', 'LOLLI') + tuple(sorted(set(keywords.values())))

    precedence = (
        ('right', 'SEMI'),
        ('left', 'PLUS'),
    )

    t_ignore = ' \t\r'
    t_LPAREN = r'\('
    t_RPAREN = r'\)'
    t_COMMA = r','
    t_DSEMI = r';;'
    t_SEMI = r';'
    t_COLON = r':'
    t_EQ = r'='
    t_LT = r'<'
    t_GT = r'>'
    t_PLUS = r'\+'
    t_BANG = r'!'
    t_DOT = r'\.'
    t_TENSOR = r'\*|⊗'

    def __init__(self, file: str):
        self.file = file
        self.text = ''
        self.lexer = lex.lex(module=self)
        self.parser = yacc.yacc(module=self, start='program', write_tables=False, debug=False,
                                errorlog=yacc.NullLogger())

    def t_comment(self, t):
        r'\#[^\n]*'
        pass

    def t_LOLLI(self, t):
        r'-o\b|⊸'
        return t

    def t_EXISTS(self, t):
        r'∃|exists\b'
        return t

    def t_INT(self, t):
        r'\d+'
        t.value = int(t.value)
        return t

    def t_ID(self, t):
        r"[A-Za-z_][A-Za-z0-9_']*"
        t.type = self.keywords.get(t.value, 'ID')
        return t

    def t_newline(self, t):
        r'\n+'
        t.lexer.lineno += len(t.value)

    def t_error(self, t):
        raise ParseError([error('PAR001', f'unexpected character {t.value[0]!r}', self.span(t.lexpos))])

    # Program

    def p_program(self, p):
        """program : items expr
                   | items"""
        p[0] = L3Program(p[1], p[2] if len(p) == 3 else None, self.file)

    def p_items(self, p):
        """items : items item
                 | empty"""
        p[0] = p[1] + [p[2]] if len(p) == 3 else []

    def p_item_import(self, p):
        """item : IMPORT LPAREN ID DOT ID COLON type RPAREN"""
        span = self.span(p.lexpos(1))
        t = p[7].inner if isinstance(p[7], Bang) else p[7]
        if not isinstance(t, Lolli):
            _fail('L3003', f'import {p[3]}.{p[5]} must have a function type', span)
        p[0] = L3Import(p[3], p[5], t, span)

    def p_item_fun(self, p):
        """item : FUN ID LPAREN ID COLON type RPAREN COLON type EQ expr DSEMI"""
        p[0] = L3Fun(p[2], p[4], p[6], p[9], p[11], self.span(p.lexpos(1)))

    def p_empty(self, p):
        """empty :"""
        p[0] = None

    # Terms

    def p_expr_let(self, p):
        """expr : LET ID EQ expr IN expr
                | LET BANG ID EQ expr IN expr"""
        if len(p) == 7:
            p[0] = Let(p[2], p[4], p[6], False, self.span(p.lexpos(1)))
        else:
            p[0] = Let(p[3], p[5], p[7], True, self.span(p.lexpos(1)))

    def p_expr_let_pair(self, p):
        """expr : LET LPAREN ID COMMA ID RPAREN EQ expr IN expr"""
        p[0] = LetPair(p[3], p[5], p[8], p[10], self.span(p.lexpos(1)))

    def p_expr_let_pack(self, p):
        """expr : LET LT ID COMMA ID GT EQ expr IN expr"""
        p[0] = LetPack(p[3], p[5], p[8], p[10], self.span(p.lexpos(1)))

    def p_expr_seq(self, p):
        """expr : expr SEMI expr"""
        p[0] = Seq(p[1], p[3], self.span(p.lexpos(2)))

    def p_expr_plus(self, p):
        """expr : expr PLUS expr"""
        p[0] = Plus(p[1], p[3], self.span(p.lexpos(2)))

    def p_expr_app(self, p):
        """expr : app"""
        p[0] = p[1]

    def p_app(self, p):
        """app : app atom
               | atom"""
        p[0] = App(p[1], p[2], p[1].span) if len(p) == 3 else p[1]

    def p_app_new(self, p):
        """app : NEW atom INT"""
        p[0] = New(p[2], p[3], self.span(p.lexpos(1)))

    def p_app_swap(self, p):
        """app : SWAP atom atom"""
        p[0] = Swap(p[2], p[3], self.span(p.lexpos(1)))

    def p_app_unary(self, p):
        """app : FREE atom
               | JOIN atom
               | SPLIT atom
               | DUPL atom
               | DROP atom"""
        node = {'FREE': Free, 'JOIN': Join, 'SPLIT': Split, 'DUPL': Dupl, 'DROP': DropE}[p.slice[1].type]
        p[0] = node(p[2], self.span(p.lexpos(1)))

    def p_atom_int(self, p):
        """atom : INT"""
        p[0] = IntLit(p[1], self.span(p.lexpos(1)))

    def p_atom_unit(self, p):
        """atom : LPAREN RPAREN"""
        p[0] = UnitLit(self.span(p.lexpos(1)))

    def p_atom_var(self, p):
        """atom : ID"""
        p[0] = Var(p[1], self.span(p.lexpos(1)))

    def p_atom_bang(self, p):
        """atom : BANG atom"""
        p[0] = BangE(p[2], self.span(p.lexpos(1)))

    def p_atom_paren(self, p):
        """atom : LPAREN expr RPAREN"""
        p[0] = p[2]

    def p_atom_pair(self, p):
        """atom : LPAREN expr COMMA expr RPAREN"""
        p[0] = Pair(p[2], p[4], self.span(p.lexpos(1)))

    def p_atom_pack(self, p):
        """atom : PACK LT ID COMMA expr GT"""
        p[0] = Pack(p[3], p[5], self.span(p.lexpos(1)))

    # Types

    def p_type_lolli(self, p):
        """type : type_tensor LOLLI type
                | type_tensor"""
        p[0] = Lolli(p[1], p[3]) if len(p) == 4 else p[1]

    def p_type_exists(self, p):
        """type : EXISTS ID DOT type"""
        p[0] = ExistsTy(p[2], p[4])

    def p_type_tensor(self, p):
        """type_tensor : type_tensor TENSOR type_unary
                       | type_unary"""
        p[0] = Tensor(p[1], p[3]) if len(p) == 4 else p[1]

    def p_type_unary(self, p):
        """type_unary : BANG type_unary
                      | PTRT ID
                      | type_atom"""
        if len(p) == 2:
            p[0] = p[1]
        elif p.slice[1].type == 'BANG':
            p[0] = Bang(p[2])
        else:
            p[0] = PtrTy(p[2])

    def p_type_cell(self, p):
        """type_unary : CAPT ID type_unary INT
                      | REFT ID type_unary INT"""
        p[0] = (CapTy if p.slice[1].type == 'CAPT' else RefL3)(p[2], p[3], p[4])

    def p_type_atom(self, p):
        """type_atom : UNITT
                     | INTT
                     | LPAREN type RPAREN"""
        if len(p) == 4:
            p[0] = p[2]
        else:
            p[0] = L3Unit() if p.slice[1].type == 'UNITT' else L3Int()

    def p_error(self, p):
        if p is None:
            raise ParseError([error('PAR002', 'unexpected end of input', self.span(len(self.text)))])
        raise ParseError([error('PAR002', f'unexpected {p.value!r}', self.span(p.lexpos))])

    def span(self, pos: int) -> SourceSpan:
        line = self.text.count('\n', 0, pos) + 1
        column = pos - (self.text.rfind('\n', 0, pos) + 1) + 1
        return SourceSpan(self.file, (line, column), (line, column))

    def parse(self, text: str) -> L3Program:
        self.text = text
        self.lexer.lineno = 1
        return self.parser.parse(text, lexer=self.lexer, tracking=True)


def parse_l3(text: str, file: str = '<input>') -> L3Program:
    """Parses an L³ source file into its imports, functions and optional final expression."""
    return _L3Parser(file).parse(text)


# Type checking

def _children(e: Term) -> List[Term]:
    return [getattr(e, f.name) for f in fields(e) if isinstance(getattr(e, f.name), Term)]


def _uses(e: Term, name: str) -> int:
    """Occurrences of a variable, respecting shadowing."""
    if isinstance(e, Var):
        return int(e.name == name)
    if isinstance(e, Let):
        return _uses(e.value, name) + (0 if e.name == name else _uses(e.body, name))
    if isinstance(e, LetPair):
        return _uses(e.value, name) + (0 if name in (e.left, e.right) else _uses(e.body, name))
    if isinstance(e, LetPack):
        return _uses(e.value, name) + (0 if e.name == name else _uses(e.body, name))
    return sum(_uses(child, name) for child in _children(e))


class _Checker:
    def __init__(self, program: L3Program):
        self.funcs: Dict[str, Lolli] = {}
        self.defined: List[str] = []
        self.fresh = 0

    def same(self, a: L3Type, b: L3Type, locs: Tuple[str, ...], span) -> bool:
        return rw_l3_type(a, locs, span) == rw_l3_type(b, locs, span)

    def linear(self, name: str, t: L3Type, body: Term, span) -> None:
        if isinstance(t, Bang):
            return
        count = _uses(body, name)
        if count != 1:
            _fail('L3001', f'linear variable {name} : {show_l3_type(t)} is used {count} times', span)

    def size_bits(self, t: L3Type, locs, span) -> int:
        return size_const(size_of((), rw_l3_type(t, locs, span)))

    def fits(self, t: L3Type, words: int, locs, span) -> None:
        bits = self.size_bits(t, locs, span)
        if bits > 32 * words:
            _fail('L3002', f'{show_l3_type(t)} needs {bits} bits but the cell holds {words} words', span)

    def loc_name(self, avoid: set) -> str:
        while True:
            self.fresh += 1
            name = f'l{self.fresh}'
            if name not in avoid:
                return name

    def package(self, t: L3Type, span) -> Tuple[str, L3Type, int]:
        if isinstance(t, ExistsTy) and isinstance(t.body, Tensor) and isinstance(t.body.left, CapTy) and \
                t.body.left.loc == t.var and t.body.right == Bang(PtrTy(t.var)):
            cap = t.body.left
            return t.var, cap.elem, cap.words
        _fail('L3003', f'expected a location package exists l. Cap l T n * !Ptr l, got {show_l3_type(t)}', span)

    def check(self, e: Term, scope: Dict[str, L3Type], locs: Tuple[str, ...]) -> L3Type:
        t = self.synth(e, scope, locs)
        e.ty = t
        return t

    def synth(self, e: Term, scope: Dict[str, L3Type], locs: Tuple[str, ...]) -> L3Type:
        if isinstance(e, IntLit):
            if not 0 <= e.value < 2 ** 31:
                _fail('L3003', f'integer literal {e.value} does not fit in 32 bits', e.span)
            return L3Int()
        if isinstance(e, UnitLit):
            return L3Unit()
        if isinstance(e, Var):
            if e.name in scope:
                return scope[e.name]
            if e.name in self.funcs:
                return Bang(self.funcs[e.name])
            _fail('L3003', f'unbound variable {e.name}', e.span)
        if isinstance(e, BangE):
            inner = e.value
            if isinstance(inner, Pair):
                left = self.check(BangE(inner.left, inner.span), scope, locs)
                right = self.check(BangE(inner.right, inner.span), scope, locs)
                self.check(inner, scope, locs)
                return Bang(Tensor(left, right))
            t = self.check(inner, scope, locs)
            if isinstance(inner, (IntLit, UnitLit)):
                return Bang(t)
            if isinstance(inner, Var) and isinstance(t, Bang):
                return t
            _fail('L3003', 'only literals, unit, unrestricted variables, function names and pairs of those can '
                           'be made unrestricted with !', e.span)
        if isinstance(e, Let):
            value = self.check(e.value, scope, locs)
            if e.banged and not isinstance(value, Bang):
                _fail('L3003', f'let !{e.name} needs an unrestricted value, got {show_l3_type(value)}', e.span)
            self.linear(e.name, value, e.body, e.span)
            return self.check(e.body, {**scope, e.name: value}, locs)
        if isinstance(e, LetPair):
            value = self.check(e.value, scope, locs)
            inner = value.inner if isinstance(value, Bang) else value
            if not isinstance(inner, Tensor):
                _fail('L3003', f'let ({e.left}, {e.right}) needs a pair, got {show_l3_type(value)}', e.span)
            if e.left == e.right:
                _fail('L3003', f'let ({e.left}, {e.right}) binds the same name twice', e.span)
            self.linear(e.left, inner.left, e.body, e.span)
            self.linear(e.right, inner.right, e.body, e.span)
            return self.check(e.body, {**scope, e.left: inner.left, e.right: inner.right}, locs)
        if isinstance(e, LetPack):
            value = self.check(e.value, scope, locs)
            if not isinstance(value, ExistsTy):
                _fail('L3003', f'let <{e.loc}, {e.name}> needs a location package, got {show_l3_type(value)}',
                      e.span)
            payload = rename_loc(value.body, value.var, e.loc)
            self.linear(e.name, payload, e.body, e.span)
            body = self.check(e.body, {**scope, e.name: payload}, (e.loc,) + locs)
            if e.loc in free_locs(body):
                _fail('L3003', f'location {e.loc} escapes its let in {show_l3_type(body)}', e.span)
            return body
        if isinstance(e, Pack):
            if e.loc not in locs:
                _fail('L3003', f'location {e.loc} is not in scope', e.span)
            return ExistsTy(e.loc, self.check(e.value, scope, locs))
        if isinstance(e, Pair):
            return Tensor(self.check(e.left, scope, locs), self.check(e.right, scope, locs))
        if isinstance(e, Seq):
            first = self.check(e.first, scope, locs)
            if not isinstance(first, (L3Unit, Bang)):
                _fail('L3003', f'the left of ";" must be Unit or unrestricted, got {show_l3_type(first)}', e.span)
            return self.check(e.second, scope, locs)
        if isinstance(e, App):
            fn = self.check(e.fn, scope, locs)
            fn = fn.inner if isinstance(fn, Bang) else fn
            if not isinstance(fn, Lolli):
                _fail('L3003', f'applying a non-function of type {show_l3_type(fn)}', e.span)
            arg = self.check(e.arg, scope, locs)
            if not self.same(arg, fn.dom, locs, e.span):
                _fail('L3003', f'argument has type {show_l3_type(arg)}, expected {show_l3_type(fn.dom)}', e.span)
            return fn.cod
        if isinstance(e, Plus):
            for side in (e.left, e.right):
                t = self.check(side, scope, locs)
                if t not in (L3Int(), Bang(L3Int())):
                    _fail('L3003', f'+ needs integers, got {show_l3_type(t)}', side.span)
            return Bang(L3Int())
        if isinstance(e, New):
            t = self.check(e.value, scope, locs)
            self.fits(t, e.words, locs, e.span)
            return _cap_package(self.loc_name(set(locs) | free_locs(t)), t, e.words)
        if isinstance(e, Free):
            var, elem, _ = self.package(self.check(e.value, scope, locs), e.span)
            if var in free_locs(elem):
                _fail('L3003', f'freed contents {show_l3_type(elem)} mention their own location', e.span)
            return elem
        if isinstance(e, Swap):
            var, old, words = self.package(self.check(e.target, scope, locs), e.span)
            new = self.check(e.value, scope, locs)
            self.fits(new, words, locs, e.span)
            if var in free_locs(old):
                _fail('L3003', f'swapped-out contents {show_l3_type(old)} mention their own location', e.span)
            fresh = self.loc_name(set(locs) | free_locs(new))
            return Tensor(_cap_package(fresh, new, words), old)
        if isinstance(e, Join):
            var, elem, words = self.package(self.check(e.value, scope, locs), e.span)
            return ExistsTy(var, RefL3(var, elem, words))
        if isinstance(e, Split):
            t = self.check(e.value, scope, locs)
            if not (isinstance(t, ExistsTy) and isinstance(t.body, RefL3) and t.body.loc == t.var):
                _fail('L3003', f'split needs exists l. Ref l T n, got {show_l3_type(t)}', e.span)
            return _cap_package(t.var, t.body.elem, t.body.words)
        if isinstance(e, Dupl):
            t = self.check(e.value, scope, locs)
            if not isinstance(t, Bang):
                _fail('L3003', f'dupl needs an unrestricted value, got {show_l3_type(t)}', e.span)
            return Tensor(t, t)
        if isinstance(e, DropE):
            t = self.check(e.value, scope, locs)
            if not isinstance(t, Bang):
                _fail('L3003', f'drop needs an unrestricted value, got {show_l3_type(t)}', e.span)
            return L3Unit()
        _fail('L3003', f'unexpected {type(e).__name__}', getattr(e, 'span', None))


def typecheck_l3(program: L3Program) -> L3Program:
    """Checks types (L3003), linear use of every non-banged variable (L3001) and cell sizes (L3002).

    Every term's type is recorded in its ``ty`` attribute.
    """
    checker = _Checker(program)
    for item in program.items:
        if item.name in checker.funcs:
            _fail('L3003', f'{item.name} is defined twice', item.span)
        if isinstance(item, L3Import):
            rw_l3_type(item.type, (), item.span)
            checker.funcs[item.name] = item.type
            continue
        checker.funcs[item.name] = Lolli(item.ptype, item.rtype)
        checker.defined.append(item.name)
        checker.linear(item.param, item.ptype, item.body, item.span)
        body = checker.check(item.body, {item.param: item.ptype}, ())
        if not checker.same(body, item.rtype, (), item.span):
            _fail('L3003', f'body of {item.name} has type {show_l3_type(body)}, expected '
                           f'{show_l3_type(item.rtype)}', item.span)
    if program.main is not None:
        if 'main' in checker.funcs:
            _fail('L3003', 'a program with a final expression cannot also define main', program.main.span)
        checker.check(program.main, {}, ())
    return program


# Code generation

class _FunctionEmitter:
    def __init__(self, index: Dict[str, int], table: Dict[str, int], params: Sequence[Type]):
        self.index = index
        self.table = table
        self.b = FunctionBuilder(params)
        self.scope: Dict[str, int] = {}
        self.locs: Tuple[Optional[str], ...] = ()

    def rw(self, t: L3Type) -> Type:
        return rw_l3_type(t, self.locs)

    def unpacking(self, outs: Sequence[Type], body, loc: Optional[str] = None) -> MemUnpack:
        before = self.b.snapshot()
        saved = self.locs
        self.locs = (loc,) + saved
        with self.b.binder(Kind.LOC):
            code = body()
        self.locs = saved
        return MemUnpack(ArrowType((), tuple(outs)), self.b.effect(before), tuple(code))

    def bind(self, name: str, t: Type) -> list:
        slot = self.b.fresh(t)
        self.scope[name] = slot
        return [self.b.set(slot, t)]

    def unbind(self, name: str, saved: Dict[str, int]) -> list:
        slot = self.scope[name]
        if name in saved:
            self.scope[name] = saved[name]
        else:
            del self.scope[name]
        return self.b.reset(slot)

    def unrestricted(self, e: Term) -> list:
        """Code for a banged term, producing values at the unrestricted qualifier."""
        if isinstance(e, IntLit):
            return [Const(NumKind.I32, e.value)]
        if isinstance(e, UnitLit):
            return [UnitV()]
        if isinstance(e, Pair):
            return self.unrestricted(e.left) + self.unrestricted(e.right) + [Group(2, UNR)]
        if isinstance(e, BangE):
            return self.unrestricted(e.value)
        return self.expr(e)

    def expr(self, e: Term) -> list:
        if isinstance(e, IntLit):
            return [Const(NumKind.I32, e.value), Qualify(LIN)]
        if isinstance(e, UnitLit):
            return [UnitV(), Qualify(LIN)]
        if isinstance(e, Var):
            if e.name in self.scope:
                instr, _ = self.b.get(self.scope[e.name])
                return [instr]
            if e.name not in self.table:
                _fail('L3003', f'imported function {e.name} can only be called directly', e.span)
            return [CodeRefI(self.table[e.name])]
        if isinstance(e, BangE):
            return self.unrestricted(e.value)
        if isinstance(e, Let):
            saved = dict(self.scope)
            code = self.expr(e.value) + self.bind(e.name, self.rw(e.value.ty))
            return code + self.expr(e.body) + self.unbind(e.name, saved)
        if isinstance(e, LetPair):
            pair = self.rw(e.value.ty).pre.types
            saved = dict(self.scope)
            code = self.expr(e.value) + [Ungroup()] + self.bind(e.right, pair[1]) + self.bind(e.left, pair[0])
            code += self.expr(e.body)
            return code + self.unbind(e.left, saved) + self.unbind(e.right, dict(saved))
        if isinstance(e, LetPack):
            return self.expr(e.value) + [self.unpacking((self.rw(e.ty),), lambda: self.let_pack(e), e.loc)]
        if isinstance(e, Pack):
            return self.expr(e.value) + [MemPack(LocVar(list(self.locs).index(e.loc)))]
        if isinstance(e, Pair):
            return self.expr(e.left) + self.expr(e.right) + [Group(2, LIN)]
        if isinstance(e, Seq):
            return self.expr(e.first) + [Drop()] + self.expr(e.second)
        if isinstance(e, App):
            code = self.expr(e.arg)
            fn = e.fn
            if isinstance(fn, Var) and fn.name not in self.scope:
                return code + [Call(self.index[fn.name])]
            return code + self.expr(fn) + [CallIndirect()]
        if isinstance(e, Plus):
            return self.expr(e.left) + self.expr(e.right) + [Binop(NumKind.I32, 'add')]
        if isinstance(e, New):
            code = self.expr(e.value) + [StructMalloc((SizeConst(32 * e.words),), LIN)]
            return code + [self.unpacking((self.rw(e.ty),), lambda: [RefSplit(), Group(2, LIN), MemPack(LocVar(0))])]
        if isinstance(e, Free):
            return self.expr(e.value) + [self.unpacking((self.rw(e.ty),), lambda: self.free(e))]
        if isinstance(e, Swap):
            return self.swap(e)
        if isinstance(e, Join):
            body = [Ungroup(), RefJoin(), MemPack(LocVar(0))]
            return self.expr(e.value) + [self.unpacking((self.rw(e.ty),), lambda: body)]
        if isinstance(e, Split):
            body = [RefSplit(), Group(2, LIN), MemPack(LocVar(0))]
            return self.expr(e.value) + [self.unpacking((self.rw(e.ty),), lambda: body)]
        if isinstance(e, Dupl):
            t = self.rw(e.value.ty)
            slot = self.b.fresh(t)
            code = self.expr(e.value) + [self.b.set(slot, t)]
            first, _ = self.b.get(slot)
            second, _ = self.b.get(slot)
            return code + [first, second] + self.b.reset(slot) + [Group(2, LIN)]
        if isinstance(e, DropE):
            return self.expr(e.value) + [Drop(), UnitV(), Qualify(LIN)]
        _fail('L3003', f'unexpected {type(e).__name__}', getattr(e, 'span', None))

    def let_pack(self, e: LetPack) -> list:
        saved = dict(self.scope)
        code = self.bind(e.name, self.rw(rename_loc(e.value.ty.body, e.value.ty.var, e.loc)))
        return code + self.expr(e.body) + self.unbind(e.name, saved)

    def free(self, e: Free) -> list:
        contents = self.rw(e.ty)
        slot = self.b.fresh(contents)
        code = [Ungroup(), RefJoin(), UnitV(), StructSwap(0), self.b.set(slot, contents), StructFree()]
        instr, _ = self.b.get(slot)
        return code + [instr] + self.b.reset(slot)

    def swap(self, e: Swap) -> list:
        new = self.rw(e.value.ty)
        new_slot = self.b.fresh(new)
        code = self.expr(e.target) + self.expr(e.value) + [self.b.set(new_slot, new)]

        def body():
            old = self.rw(e.ty.right)
            old_slot = self.b.fresh(old)
            inner = [Ungroup(), RefJoin()]
            get_new, _ = self.b.get(new_slot)
            inner += [get_new, StructSwap(0), self.b.set(old_slot, old)]
            inner += [RefSplit(), Group(2, LIN), MemPack(LocVar(0))]
            get_old, _ = self.b.get(old_slot)
            return inner + [get_old, Group(2, LIN)] + self.b.reset(old_slot) + self.b.reset(new_slot)

        return code + [self.unpacking((self.rw(e.ty),), body)]


def codegen_l3(program: L3Program) -> RWModule:
    """Emits a typed L³ program: imports first, then the functions, then ``main``. Defined functions fill the
    table so they can be used as values."""
    imports = [item for item in program.items if isinstance(item, L3Import)]
    defined = [item for item in program.items if isinstance(item, L3Fun)]
    index = {item.name: i for i, item in enumerate(imports + defined)}
    table = {item.name: k for k, item in enumerate(defined)}
    funcs = []
    for item in imports:
        funcs.append(FuncImport(item.module, item.name,
                                FunType((), (rw_l3_type(item.type.dom),), (rw_l3_type(item.type.cod),)),))
    for item in defined:
        ft = FunType((), (rw_l3_type(item.ptype),), (rw_l3_type(item.rtype),))
        emitter = _FunctionEmitter(index, table, ft.ins)
        emitter.scope[item.param] = 0
        body = emitter.expr(item.body)
        funcs.append(Func(ft, tuple(emitter.b.sizes), tuple(body), (item.name,)))
    if program.main is not None:
        emitter = _FunctionEmitter(index, table, ())
        body = emitter.expr(program.main)
        ft = FunType((), (), (rw_l3_type(program.main.ty),))
        funcs.append(Func(ft, tuple(emitter.b.sizes), tuple(body), ('main',)))
    entries = tuple(len(imports) + k for k in range(len(defined)))
    return RWModule(tuple(funcs), (), Table(entries))


def compile_l3(text: str, file: str = '<input>', check: bool = True) -> RWModule:
    """Parses, checks and compiles L³ source text

    Parameters
    ----------
    text: str
        Source text.

    file: str, default = '<input>'
        File name used in diagnostics.

    check: bool, default = True
        Type check the result with the RichWasm checker.

    Returns
    -------
    module: RWModule
        The compiled module.
    """
    module = codegen_l3(typecheck_l3(parse_l3(text, file)))
    if check:
        check_module(module)
    logger.info('compiled %s: %d functions', file, len(module.funcs))
    return module
