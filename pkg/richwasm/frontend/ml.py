"""Compiler from a small ML with linking-type extensions to RichWasm.

The pipeline has four stages, each usable on its own:

``parse_ml``
    surface text to an ``MLProgram``; top-level ``let``/``fun``/``import`` chains become module items.
``typecheck_ml``
    ordinary ML typing. ``(T)^lin`` is an opaque type here: nothing stops a program from using such a value twice,
    that is left to the RichWasm checker.
``closure_convert``
    every ``fun`` expression becomes a lifted code unit plus the environment of the variables it captures.
``annotate`` and ``codegen_ml``
    RichWasm types for every unit, then the instructions, with a local effect on every block.

Representations: ``Int`` is ``i32^unr``, ``Ref T`` a one-field struct in the unrestricted memory, variants are
unrestricted variant references, ``mu`` is ``rec``, and function values are closures packed as
``ExLoc(Ref RW l (Ex unr 64 Prod[a, CodeRef(a, A -> B)]))``. Type variables are bounded by ``unr`` and 64 bits.
"""
import logging
from dataclasses import dataclass, fields, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

from ply import lex, yacc

from richwasm.core.constraints import size_const, size_of
from richwasm.core.env import TypeBound
from richwasm.core.ir import (Kind, UNR, LIN, Priv, NumKind, SizeConst, LocVar, Type, ProdT, RefT, RecT, ExLocT,
                              CodeRefT, VarT, VariantHT, StructHT, ExHT, TypeQ, FunType, ArrowType, PreTypeI, Const,
                              UnitV, Binop, Relop, Unreachable, Drop, Ite, GetGlobal, CodeRefI, Inst, CallIndirect,
                              Call, RecFold, RecUnfold, MemUnpack, Group, Ungroup, StructMalloc, StructGet,
                              StructSet, StructSwap, VariantMalloc, VariantCase, ExistPack, ExistUnpack, Func,
                              FuncImport, Global, Table, RWModule)
from richwasm.core.subst import shift
from richwasm.core.typecheck import I32_UNR, UNIT_UNR, check_module
from richwasm.frontend.emit import FunctionBuilder
from richwasm.util.utils import CheckError, FrontendError, ParseError, SourceSpan, error

logger = logging.getLogger(__name__)

TYPE_PARAM_BOUND = TypeBound(UNR, SizeConst(64))
MU_BOUND = TypeBound(UNR, None)


# Types

@dataclass(frozen=True)
class IntTy:
    pass


@dataclass(frozen=True)
class UnitTy:
    pass


@dataclass(frozen=True)
class RefTy:
    elem: 'MLType'


@dataclass(frozen=True)
class RefToLinTy:
    elem: 'MLType'


@dataclass(frozen=True)
class LinTy:
    inner: 'MLType'


@dataclass(frozen=True)
class ProdTy:
    items: Tuple['MLType', ...]


@dataclass(frozen=True)
class VariantTy:
    cases: Tuple['MLType', ...]


@dataclass(frozen=True)
class MuTy:
    var: str
    body: 'MLType'


@dataclass(frozen=True)
class ForAllTy:
    var: str
    body: 'MLType'


@dataclass(frozen=True)
class VarTy:
    name: str


@dataclass(frozen=True)
class ArrowTy:
    dom: 'MLType'
    cod: 'MLType'


MLType = Union[IntTy, UnitTy, RefTy, RefToLinTy, LinTy, ProdTy, VariantTy, MuTy, ForAllTy, VarTy, ArrowTy]


@dataclass(frozen=True)
class Scheme:
    """Prenex-polymorphic function signature."""
    tparams: Tuple[str, ...]
    dom: MLType
    cod: MLType

    def instance(self, types: Sequence[MLType]) -> ArrowTy:
        mapping = dict(zip(self.tparams, types))
        return ArrowTy(subst_ml_type(self.dom, mapping), subst_ml_type(self.cod, mapping))


def subst_ml_type(t: MLType, mapping: Dict[str, MLType]) -> MLType:
    if isinstance(t, VarTy):
        return mapping.get(t.name, t)
    if isinstance(t, (MuTy, ForAllTy)):
        inner = {k: v for k, v in mapping.items() if k != t.var}
        return replace(t, body=subst_ml_type(t.body, inner))
    if isinstance(t, RefTy):
        return RefTy(subst_ml_type(t.elem, mapping))
    if isinstance(t, RefToLinTy):
        return RefToLinTy(subst_ml_type(t.elem, mapping))
    if isinstance(t, LinTy):
        return LinTy(subst_ml_type(t.inner, mapping))
    if isinstance(t, ProdTy):
        return ProdTy(tuple(subst_ml_type(c, mapping) for c in t.items))
    if isinstance(t, VariantTy):
        return VariantTy(tuple(subst_ml_type(c, mapping) for c in t.cases))
    if isinstance(t, ArrowTy):
        return ArrowTy(subst_ml_type(t.dom, mapping), subst_ml_type(t.cod, mapping))
    return t


def show_ml_type(t: MLType) -> str:
    if isinstance(t, IntTy):
        return 'Int'
    if isinstance(t, UnitTy):
        return 'Unit'
    if isinstance(t, VarTy):
        return t.name
    if isinstance(t, RefTy):
        return f'Ref ({show_ml_type(t.elem)})'
    if isinstance(t, RefToLinTy):
        return f'ref_to_lin ({show_ml_type(t.elem)})'
    if isinstance(t, LinTy):
        return f'({show_ml_type(t.inner)})^lin'
    if isinstance(t, ProdTy):
        return '(' + ' * '.join(show_ml_type(c) for c in t.items) + ')'
    if isinstance(t, VariantTy):
        return '<' + ' | '.join(show_ml_type(c) for c in t.cases) + '>'
    if isinstance(t, MuTy):
        return f'(mu {t.var}. {show_ml_type(t.body)})'
    if isinstance(t, ForAllTy):
        return f'(forall {t.var}. {show_ml_type(t.body)})'
    return f'({show_ml_type(t.dom)} -> {show_ml_type(t.cod)})'


# Terms

class Expr:
    """Base of the term nodes; the type checker stores each node's type in ``ty``."""
    ty: Optional[MLType] = None


@dataclass(eq=False)
class IntLit(Expr):
    value: int
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class UnitLit(Expr):
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class Var(Expr):
    name: str
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class TyApp(Expr):
    name: str
    types: Tuple[MLType, ...]
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class App(Expr):
    fn: Expr
    arg: Expr
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class Lam(Expr):
    param: Optional[str]
    ptype: MLType
    body: Expr
    rtype: Optional[MLType] = None
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class Let(Expr):
    name: str
    value: Expr
    body: Expr
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class Seq(Expr):
    first: Expr
    second: Expr
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class If(Expr):
    cond: Expr
    then: Expr
    else_: Expr
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class MkRef(Expr):
    value: Expr
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class Deref(Expr):
    target: Expr
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class Assign(Expr):
    target: Expr
    value: Expr
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class NewCell(Expr):
    elem: MLType
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class Tuple_(Expr):
    items: Tuple[Expr, ...]
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class Proj(Expr):
    index: int
    value: Expr
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class Inj(Expr):
    index: int
    value: Expr
    vtype: MLType
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class Case(Expr):
    value: Expr
    branches: Tuple[Tuple[str, Expr], ...]
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class Fold(Expr):
    mu: MLType
    value: Expr
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class Unfold(Expr):
    value: Expr
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class FunIn(Expr):
    """``fun f ... = e in rest``; ``rest`` is None for the last item of a program."""
    decl: 'FunDecl'
    rest: Optional[Expr]
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class ImportIn(Expr):
    decl: 'ImportDecl'
    rest: Expr
    span: Optional[SourceSpan] = None


# Produced by closure conversion

@dataclass(eq=False)
class GlobalRef(Expr):
    name: str
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class EnvRef(Expr):
    index: int
    name: str
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class MakeClosure(Expr):
    code: int
    captured: Tuple[Expr, ...]
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class CallDirect(Expr):
    name: str
    types: Tuple[MLType, ...]
    arg: Expr
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class CallClosure(Expr):
    fn: Expr
    arg: Expr
    span: Optional[SourceSpan] = None


# Programs

@dataclass(eq=False)
class GlobalDecl:
    name: str
    value: Expr
    span: Optional[SourceSpan] = None


@dataclass(eq=False)
class FunDecl:
    name: str
    tparams: Tuple[str, ...]
    param: Optional[str]
    ptype: MLType
    rtype: Optional[MLType]
    body: Expr
    span: Optional[SourceSpan] = None
    scheme: Optional[Scheme] = None


@dataclass(eq=False)
class ImportDecl:
    module: str
    name: str
    scheme: Scheme
    span: Optional[SourceSpan] = None
    fun_type: Optional[FunType] = None


@dataclass(eq=False)
class MLProgram:
    items: List[Union[GlobalDecl, FunDecl, ImportDecl]]
    main: Optional[Expr] = None
    file: str = '<input>'


def _fail(message: str, span: Optional[SourceSpan] = None):
    raise FrontendError([error('ML001', message, span)])


def _children(e: Expr) -> List[Expr]:
    found = []
    for f in fields(e):
        value = getattr(e, f.name)
        if isinstance(value, Expr):
            found.append(value)
        elif isinstance(value, tuple):
            for item in value:
                if isinstance(item, Expr):
                    found.append(item)
                elif isinstance(item, tuple) and len(item) == 2 and isinstance(item[1], Expr):
                    found.append(item[1])
    return found


# Parsing

class _MLParser:
    keywords = {
        'let': 'LET', 'in': 'IN', 'fun': 'FUN', 'import': 'IMPORT', 'if': 'IF', 'then': 'THEN', 'else': 'ELSE',
        'case': 'CASE', 'of': 'OF', 'ref': 'REF', 'fold': 'FOLD', 'unfold': 'UNFOLD', 'inj': 'INJ',
        'ref_to_lin': 'REFTOLIN', 'Ref': 'REFT', 'Int': 'INTT', 'Unit': 'UNITT', 'mu': 'MU', 'forall': 'FORALL',
        'lin': 'LINQ',
    }
    tokens = ('INT', 'ID', 'LPAREN', 'RPAREN', 'LBRACKET', 'RBRACKET', 'COMMA', 'SEMI', 'COLON', 'ASSIGN', 'EQ',
              'LT', 'GT', 'PLUS', 'MINUS', 'TIMES', 'BANG', 'HASH', 'CARET', 'BAR', 'DOT', 'ARROW') + \
        tuple(sorted(set(keywords.values())))

    precedence = (
        ('right', 'SEMI'),
        ('nonassoc', 'ELSE'),
        ('nonassoc', 'ASSIGN'),
        ('nonassoc', 'EQ', 'LT'),
        ('left', 'PLUS', 'MINUS'),
        ('left', 'TIMES'),
    )

    t_ignore = ' \t\r'
    t_LPAREN = r'\('
    t_RPAREN = r'\)'
    t_LBRACKET = r'\['
    t_RBRACKET = r'\]'
    t_COMMA = r','
    t_SEMI = r';'
    t_ASSIGN = r':='
    t_COLON = r':'
    t_EQ = r'='
    t_LT = r'<'
    t_GT = r'>'
    t_PLUS = r'\+'
    t_ARROW = r'->'
    t_MINUS = r'-'
    t_TIMES = r'\*'
    t_BANG = r'!'
    t_HASH = r'\#'
    t_CARET = r'\^'
    t_BAR = r'\|'
    t_DOT = r'\.'

    def __init__(self, file: str):
        self.file = file
        self.text = ''
        self.lexer = lex.lex(module=self)
        self.parser = yacc.yacc(module=self, start='program', write_tables=False, debug=False,
                                errorlog=yacc.NullLogger())

    def t_comment(self, t):
        r"\(\*(?:.|\n)*?\*\)"
        t.lexer.lineno += t.value.count('\n')

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

    # Expressions

    def p_program(self, p):
        """program : expr"""
        p[0] = p[1]

    def p_expr_let(self, p):
        """expr : LET ID EQ expr IN expr"""
        p[0] = Let(p[2], p[4], p[6], self.span(p.lexpos(1)))

    def p_expr_fun_in(self, p):
        """expr : FUN ID tparams param rtype EQ expr IN expr"""
        name, ptype = p[4]
        decl = FunDecl(p[2], p[3], name, ptype, p[5], p[7], self.span(p.lexpos(1)))
        p[0] = FunIn(decl, p[9], decl.span)

    def p_expr_fun_last(self, p):
        """expr : FUN ID tparams param rtype EQ expr"""
        name, ptype = p[4]
        decl = FunDecl(p[2], p[3], name, ptype, p[5], p[7], self.span(p.lexpos(1)))
        p[0] = FunIn(decl, None, decl.span)

    def p_expr_import(self, p):
        """expr : IMPORT ID DOT ID COLON type IN expr"""
        span = self.span(p.lexpos(1))
        t, tparams = p[6], []
        while isinstance(t, ForAllTy):
            tparams.append(t.var)
            t = t.body
        if not isinstance(t, ArrowTy):
            _fail(f'import {p[2]}.{p[4]} must have a function type', span)
        p[0] = ImportIn(ImportDecl(p[2], p[4], Scheme(tuple(tparams), t.dom, t.cod), span), p[8], span)

    def p_expr_lambda(self, p):
        """expr : FUN param ARROW expr"""
        name, ptype = p[2]
        p[0] = Lam(name, ptype, p[4], None, self.span(p.lexpos(1)))

    def p_expr_if(self, p):
        """expr : IF expr THEN expr ELSE expr"""
        p[0] = If(p[2], p[4], p[6], self.span(p.lexpos(1)))

    def p_expr_case(self, p):
        """expr : CASE expr OF branches"""
        p[0] = Case(p[2], tuple(p[4]), self.span(p.lexpos(1)))

    def p_branches(self, p):
        """branches : branches BAR ID ARROW expr
                    | BAR ID ARROW expr"""
        p[0] = p[1] + [(p[3], p[5])] if len(p) == 6 else [(p[2], p[4])]

    def p_expr_seq(self, p):
        """expr : expr SEMI expr"""
        p[0] = Seq(p[1], p[3], self.span(p.lexpos(2)))

    def p_expr_assign(self, p):
        """expr : expr ASSIGN expr"""
        p[0] = Assign(p[1], p[3], self.span(p.lexpos(2)))

    def p_expr_binop(self, p):
        """expr : expr PLUS expr
                | expr MINUS expr
                | expr TIMES expr
                | expr EQ expr
                | expr LT expr"""
        p[0] = BinOp(p[2], p[1], p[3], self.span(p.lexpos(2)))

    def p_expr_inj(self, p):
        """expr : INJ INT atom COLON type"""
        p[0] = Inj(p[2], p[3], p[5], self.span(p.lexpos(1)))

    def p_expr_app(self, p):
        """expr : app"""
        p[0] = p[1]

    def p_app(self, p):
        """app : app atom
               | atom"""
        p[0] = App(p[1], p[2], p[1].span) if len(p) == 3 else p[1]

    def p_atom_int(self, p):
        """atom : INT"""
        p[0] = IntLit(p[1], self.span(p.lexpos(1)))

    def p_atom_unit(self, p):
        """atom : LPAREN RPAREN"""
        p[0] = UnitLit(self.span(p.lexpos(1)))

    def p_atom_var(self, p):
        """atom : ID"""
        p[0] = Var(p[1], self.span(p.lexpos(1)))

    def p_atom_tyapp(self, p):
        """atom : ID LBRACKET types RBRACKET"""
        p[0] = TyApp(p[1], tuple(p[3]), self.span(p.lexpos(1)))

    def p_atom_paren(self, p):
        """atom : LPAREN expr RPAREN"""
        p[0] = p[2]

    def p_atom_tuple(self, p):
        """atom : LPAREN expr COMMA exprs RPAREN"""
        p[0] = Tuple_(tuple([p[2]] + p[4]), self.span(p.lexpos(1)))

    def p_exprs(self, p):
        """exprs : exprs COMMA expr
                 | expr"""
        p[0] = p[1] + [p[3]] if len(p) == 4 else [p[1]]

    def p_atom_deref(self, p):
        """atom : BANG atom"""
        p[0] = Deref(p[2], self.span(p.lexpos(1)))

    def p_atom_ref(self, p):
        """atom : REF atom"""
        p[0] = MkRef(p[2], self.span(p.lexpos(1)))

    def p_atom_proj(self, p):
        """atom : HASH INT atom"""
        p[0] = Proj(p[2], p[3], self.span(p.lexpos(1)))

    def p_atom_fold(self, p):
        """atom : FOLD type_atom atom"""
        p[0] = Fold(p[2], p[3], self.span(p.lexpos(1)))

    def p_atom_unfold(self, p):
        """atom : UNFOLD atom"""
        p[0] = Unfold(p[2], self.span(p.lexpos(1)))

    def p_atom_cell(self, p):
        """atom : REFTOLIN type_post"""
        p[0] = NewCell(p[2], self.span(p.lexpos(1)))

    def p_tparams(self, p):
        """tparams : LBRACKET ids RBRACKET
                   | empty"""
        p[0] = tuple(p[2]) if len(p) == 4 else ()

    def p_ids(self, p):
        """ids : ids COMMA ID
               | ID"""
        p[0] = p[1] + [p[3]] if len(p) == 4 else [p[1]]

    def p_param(self, p):
        """param : LPAREN ID COLON type RPAREN
                 | LPAREN LPAREN RPAREN COLON type RPAREN"""
        p[0] = (p[2], p[4]) if len(p) == 6 else (None, p[5])

    def p_rtype(self, p):
        """rtype : COLON type
                 | empty"""
        p[0] = p[2] if len(p) == 3 else None

    def p_empty(self, p):
        """empty :"""
        p[0] = None

    # Types

    def p_type_arrow(self, p):
        """type : type_prod ARROW type
                | type_prod"""
        p[0] = ArrowTy(p[1], p[3]) if len(p) == 4 else p[1]

    def p_type_binder(self, p):
        """type : FORALL ID DOT type
                | MU ID DOT type"""
        p[0] = ForAllTy(p[2], p[4]) if p.slice[1].type == 'FORALL' else MuTy(p[2], p[4])

    def p_type_prod(self, p):
        """type_prod : prod_items"""
        p[0] = p[1][0] if len(p[1]) == 1 else ProdTy(tuple(p[1]))

    def p_prod_items(self, p):
        """prod_items : prod_items TIMES type_post
                      | type_post"""
        p[0] = p[1] + [p[3]] if len(p) == 4 else [p[1]]

    def p_type_post(self, p):
        """type_post : type_post CARET LINQ
                     | type_app"""
        p[0] = LinTy(p[1]) if len(p) == 4 else p[1]

    def p_type_app(self, p):
        """type_app : REFT type_app
                    | REFTOLIN type_app
                    | type_atom"""
        if len(p) == 2:
            p[0] = p[1]
        else:
            p[0] = RefTy(p[2]) if p.slice[1].type == 'REFT' else RefToLinTy(p[2])

    def p_type_atom(self, p):
        """type_atom : INTT
                     | UNITT
                     | ID"""
        kind = p.slice[1].type
        p[0] = IntTy() if kind == 'INTT' else UnitTy() if kind == 'UNITT' else VarTy(p[1])

    def p_type_atom_group(self, p):
        """type_atom : LPAREN type RPAREN
                     | LT cases GT"""
        p[0] = p[2] if p.slice[1].type == 'LPAREN' else VariantTy(tuple(p[2]))

    def p_cases(self, p):
        """cases : cases BAR type
                 | type"""
        p[0] = p[1] + [p[3]] if len(p) == 4 else [p[1]]

    def p_types(self, p):
        """types : types COMMA type
                 | type"""
        p[0] = p[1] + [p[3]] if len(p) == 4 else [p[1]]

    def p_error(self, p):
        if p is None:
            raise ParseError([error('PAR002', 'unexpected end of input', self.span(len(self.text)))])
        raise ParseError([error('PAR002', f'unexpected {p.value!r}', self.span(p.lexpos))])

    def span(self, pos: int) -> SourceSpan:
        line = self.text.count('\n', 0, pos) + 1
        column = pos - (self.text.rfind('\n', 0, pos) + 1) + 1
        return SourceSpan(self.file, (line, column), (line, column))

    def parse(self, text: str) -> Expr:
        self.text = text
        self.lexer.lineno = 1
        return self.parser.parse(text, lexer=self.lexer, tracking=True)


def _desugar(e: Expr) -> Expr:
    """Turns nested ``fun ... in`` into a let-bound lambda and rejects nested imports."""
    if isinstance(e, FunIn):
        d = e.decl
        if e.rest is None:
            _fail(f'local function {d.name} needs a body after "in"', d.span)
        if d.tparams:
            _fail(f'local function {d.name} cannot take type parameters', d.span)
        lam = Lam(d.param, d.ptype, _desugar(d.body), d.rtype, d.span)
        return Let(d.name, lam, _desugar(e.rest), d.span)
    if isinstance(e, ImportIn):
        _fail('imports must come before any expression', e.span)
    changes = {}
    for f in fields(e):
        value = getattr(e, f.name)
        if isinstance(value, Expr):
            changes[f.name] = _desugar(value)
        elif f.name == 'items':
            changes[f.name] = tuple(_desugar(item) for item in value)
        elif f.name == 'branches':
            changes[f.name] = tuple((name, _desugar(body)) for name, body in value)
    return replace(e, **changes) if changes else e


def parse_ml(text: str, file: str = '<input>') -> MLProgram:
    """Parses an ML source file

    Parameters
    ----------
    text: str
        Source text.

    file: str, default = '<input>'
        File name used in diagnostics.

    Returns
    -------
    program: MLProgram
        Top-level items and the final expression, if any.
    """
    e = _MLParser(file).parse(text)
    items = []
    while True:
        if isinstance(e, Let):
            items.append(GlobalDecl(e.name, _desugar(e.value), e.span))
            e = e.body
        elif isinstance(e, FunIn):
            d = e.decl
            items.append(replace(d, body=_desugar(d.body)))
            if e.rest is None:
                return MLProgram(items, None, file)
            e = e.rest
        elif isinstance(e, ImportIn):
            items.append(e.decl)
            e = e.rest
        else:
            return MLProgram(items, _desugar(e), file)


# Type checking

class _Typer:
    def __init__(self):
        self.globals: Dict[str, MLType] = {}
        self.funcs: Dict[str, Scheme] = {}

    def declare(self, name: str, span) -> None:
        if name in self.globals or name in self.funcs:
            _fail(f'{name} is defined twice at top level', span)

    def well_formed(self, t: MLType, tvars: frozenset, span) -> None:
        if isinstance(t, VarTy):
            if t.name not in tvars:
                _fail(f'unbound type variable {t.name}', span)
        elif isinstance(t, MuTy):
            self.well_formed(t.body, tvars | {t.var}, span)
        elif isinstance(t, ForAllTy):
            _fail('forall is only allowed at the front of an import signature', span)
        elif isinstance(t, (RefTy, RefToLinTy)):
            self.well_formed(t.elem, tvars, span)
        elif isinstance(t, LinTy):
            self.well_formed(t.inner, tvars, span)
        elif isinstance(t, ProdTy):
            for c in t.items:
                self.well_formed(c, tvars, span)
        elif isinstance(t, VariantTy):
            for c in t.cases:
                self.well_formed(c, tvars, span)
        elif isinstance(t, ArrowTy):
            self.well_formed(t.dom, tvars, span)
            self.well_formed(t.cod, tvars, span)

    def expect(self, actual: MLType, expected: MLType, what: str, span) -> None:
        if actual != expected:
            _fail(f'{what} has type {show_ml_type(actual)}, expected {show_ml_type(expected)}', span)

    def check(self, e: Expr, scope: Dict[str, MLType], tvars: frozenset) -> MLType:
        t = self.synth(e, scope, tvars)
        e.ty = t
        return t

    def synth(self, e: Expr, scope: Dict[str, MLType], tvars: frozenset) -> MLType:
        if isinstance(e, IntLit):
            if not 0 <= e.value < 2 ** 31:
                _fail(f'integer literal {e.value} does not fit in 32 bits', e.span)
            return IntTy()
        if isinstance(e, UnitLit):
            return UnitTy()
        if isinstance(e, Var):
            if e.name in scope:
                return scope[e.name]
            if e.name in self.globals:
                return self.globals[e.name]
            if e.name in self.funcs:
                scheme = self.funcs[e.name]
                if scheme.tparams:
                    _fail(f'{e.name} is polymorphic; apply it to types with {e.name} [...]', e.span)
                return ArrowTy(scheme.dom, scheme.cod)
            _fail(f'unbound variable {e.name}', e.span)
        if isinstance(e, TyApp):
            scheme = self.funcs.get(e.name)
            if scheme is None or e.name in scope:
                _fail(f'type application needs a top-level function, {e.name} is not one', e.span)
            if len(e.types) != len(scheme.tparams):
                _fail(f'{e.name} takes {len(scheme.tparams)} type arguments, got {len(e.types)}', e.span)
            for t in e.types:
                self.well_formed(t, tvars, e.span)
            return scheme.instance(e.types)
        if isinstance(e, App):
            fn = self.check(e.fn, scope, tvars)
            if not isinstance(fn, ArrowTy):
                _fail(f'applying a non-function of type {show_ml_type(fn)}', e.span)
            self.expect(self.check(e.arg, scope, tvars), fn.dom, 'argument', e.arg.span)
            return fn.cod
        if isinstance(e, Lam):
            self.well_formed(e.ptype, tvars, e.span)
            inner = dict(scope)
            if e.param is not None:
                inner[e.param] = e.ptype
            body = self.check(e.body, inner, tvars)
            if e.rtype is not None:
                self.well_formed(e.rtype, tvars, e.span)
                self.expect(body, e.rtype, 'function body', e.span)
            return ArrowTy(e.ptype, body)
        if isinstance(e, Let):
            value = self.check(e.value, scope, tvars)
            return self.check(e.body, {**scope, e.name: value}, tvars)
        if isinstance(e, Seq):
            self.check(e.first, scope, tvars)
            return self.check(e.second, scope, tvars)
        if isinstance(e, BinOp):
            self.expect(self.check(e.left, scope, tvars), IntTy(), f'left operand of {e.op}', e.span)
            self.expect(self.check(e.right, scope, tvars), IntTy(), f'right operand of {e.op}', e.span)
            return IntTy()
        if isinstance(e, If):
            self.expect(self.check(e.cond, scope, tvars), IntTy(), 'condition', e.span)
            then = self.check(e.then, scope, tvars)
            self.expect(self.check(e.else_, scope, tvars), then, 'else branch', e.span)
            return then
        if isinstance(e, MkRef):
            return RefTy(self.check(e.value, scope, tvars))
        if isinstance(e, Deref):
            target = self.check(e.target, scope, tvars)
            if not isinstance(target, (RefTy, RefToLinTy)):
                _fail(f'dereferencing a non-reference of type {show_ml_type(target)}', e.span)
            return target.elem
        if isinstance(e, Assign):
            target = self.check(e.target, scope, tvars)
            if not isinstance(target, (RefTy, RefToLinTy)):
                _fail(f'assigning to a non-reference of type {show_ml_type(target)}', e.span)
            self.expect(self.check(e.value, scope, tvars), target.elem, 'assigned value', e.span)
            return UnitTy()
        if isinstance(e, NewCell):
            self.well_formed(e.elem, tvars, e.span)
            return RefToLinTy(e.elem)
        if isinstance(e, Tuple_):
            return ProdTy(tuple(self.check(item, scope, tvars) for item in e.items))
        if isinstance(e, Proj):
            t = self.check(e.value, scope, tvars)
            if not isinstance(t, ProdTy) or not 0 <= e.index < len(t.items):
                _fail(f'#{e.index} applied to {show_ml_type(t)}', e.span)
            return t.items[e.index]
        if isinstance(e, Inj):
            self.well_formed(e.vtype, tvars, e.span)
            if not isinstance(e.vtype, VariantTy) or not 0 <= e.index < len(e.vtype.cases):
                _fail(f'inj {e.index} into {show_ml_type(e.vtype)}', e.span)
            self.expect(self.check(e.value, scope, tvars), e.vtype.cases[e.index], 'injected value', e.span)
            return e.vtype
        if isinstance(e, Case):
            t = self.check(e.value, scope, tvars)
            if not isinstance(t, VariantTy):
                _fail(f'case on a non-variant of type {show_ml_type(t)}', e.span)
            if len(e.branches) != len(t.cases):
                _fail(f'case has {len(e.branches)} branches for {len(t.cases)} cases', e.span)
            result = None
            for (name, body), case in zip(e.branches, t.cases):
                bt = self.check(body, {**scope, name: case}, tvars)
                if result is None:
                    result = bt
                self.expect(bt, result, 'case branch', body.span)
            return result
        if isinstance(e, Fold):
            self.well_formed(e.mu, tvars, e.span)
            if not isinstance(e.mu, MuTy):
                _fail(f'fold needs a mu type, got {show_ml_type(e.mu)}', e.span)
            unfolded = subst_ml_type(e.mu.body, {e.mu.var: e.mu})
            self.expect(self.check(e.value, scope, tvars), unfolded, 'folded value', e.span)
            return e.mu
        if isinstance(e, Unfold):
            t = self.check(e.value, scope, tvars)
            if not isinstance(t, MuTy):
                _fail(f'unfold of a non-recursive type {show_ml_type(t)}', e.span)
            return subst_ml_type(t.body, {t.var: t})
        _fail(f'unexpected {type(e).__name__}', getattr(e, 'span', None))


def typecheck_ml(program: MLProgram) -> MLProgram:
    """Checks an ML program and records the type of every term in its ``ty`` attribute.

    Raises
    ------
    FrontendError
        ML001 with the span of the offending term.
    """
    typer = _Typer()
    for item in program.items:
        if isinstance(item, GlobalDecl):
            typer.declare(item.name, item.span)
            typer.globals[item.name] = typer.check(item.value, {}, frozenset())
        elif isinstance(item, ImportDecl):
            typer.declare(item.name, item.span)
            tvars = frozenset(item.scheme.tparams)
            typer.well_formed(item.scheme.dom, tvars, item.span)
            typer.well_formed(item.scheme.cod, tvars, item.span)
            typer.funcs[item.name] = item.scheme
        else:
            typer.declare(item.name, item.span)
            tvars = frozenset(item.tparams)
            typer.well_formed(item.ptype, tvars, item.span)
            scope = {item.param: item.ptype} if item.param is not None else {}
            if item.rtype is not None:
                typer.well_formed(item.rtype, tvars, item.span)
                item.scheme = Scheme(item.tparams, item.ptype, item.rtype)
                typer.funcs[item.name] = item.scheme
                typer.expect(typer.check(item.body, scope, tvars), item.rtype, f'body of {item.name}', item.span)
            else:
                body = typer.check(item.body, scope, tvars)
                item.scheme = Scheme(item.tparams, item.ptype, body)
                typer.funcs[item.name] = item.scheme
    if program.main is not None:
        if 'main' in typer.funcs:
            _fail('a program with a final expression cannot also define main', program.main.span)
        typer.check(program.main, {}, frozenset())
    logger.debug('ML program typed: %d items', len(program.items))
    return program


# Closure conversion

@dataclass(eq=False)
class CodeUnit:
    """One RichWasm function. Lifted units take their closure environment as an extra first parameter."""
    name: str
    tparams: Tuple[str, ...]
    params: Tuple[Tuple[Optional[str], MLType], ...]
    rtype: MLType
    body: Expr
    exports: Tuple[str, ...] = ()
    captured: Tuple[Tuple[str, MLType], ...] = ()
    lifted: bool = False
    # filled in by annotate
    type_scope: Tuple[Tuple[str, TypeBound], ...] = ()
    param_types: Tuple[Type, ...] = ()
    fun_type: Optional[FunType] = None
    env_type: Optional[Type] = None
    boxed_env: bool = False


@dataclass(eq=False)
class ConvertedProgram:
    imports: List[ImportDecl]
    globals: List[Tuple[str, MLType, str]]
    units: List[CodeUnit]
    codes: List[CodeUnit]


def _free_names(e: Expr, bound: frozenset, out: List[str]) -> List[str]:
    if isinstance(e, Var):
        if e.name not in bound and e.name not in out:
            out.append(e.name)
    elif isinstance(e, Lam):
        _free_names(e.body, bound | ({e.param} if e.param is not None else set()), out)
    elif isinstance(e, Let):
        _free_names(e.value, bound, out)
        _free_names(e.body, bound | {e.name}, out)
    elif isinstance(e, Case):
        _free_names(e.value, bound, out)
        for name, body in e.branches:
            _free_names(body, bound | {name}, out)
    else:
        for child in _children(e):
            _free_names(child, bound, out)
    return out


def _typed(node: Expr, ty: MLType) -> Expr:
    node.ty = ty
    return node


class _Converter:
    def __init__(self, program: MLProgram):
        self.program = program
        self.globals = {item.name for item in program.items if isinstance(item, GlobalDecl)}
        self.codes: List[CodeUnit] = []
        self.adapters: Dict[tuple, int] = {}

    def run(self) -> ConvertedProgram:
        imports, globals_, units = [], [], []
        for item in self.program.items:
            if isinstance(item, ImportDecl):
                imports.append(item)
            elif isinstance(item, GlobalDecl):
                init = f'{item.name}#init'
                units.append(CodeUnit(init, (), (), item.value.ty, self.convert(item.value, {}, ())))
                globals_.append((item.name, item.value.ty, init))
            else:
                scope = {item.param: item.ptype} if item.param is not None else {}
                body = self.convert(item.body, {k: ('local', t) for k, t in scope.items()}, item.tparams)
                units.append(CodeUnit(item.name, item.tparams, ((item.param, item.ptype),), item.scheme.cod, body,
                                      exports=(item.name,)))
        main = self.program.main
        if main is not None:
            units.append(CodeUnit('main', (), (), main.ty, self.convert(main, {}, ()), exports=('main',)))
        logger.debug('closure conversion lifted %d code units', len(self.codes))
        return ConvertedProgram(imports, globals_, units, self.codes)

    def adapter(self, name: str, types: Tuple[MLType, ...], ty: ArrowTy, tparams: Tuple[str, ...]) -> int:
        """Code unit that lets a top-level function be used as a closure."""
        key = (name, types, tparams)
        if key not in self.adapters:
            arg = _typed(Var('%arg'), ty.dom)
            body = _typed(CallDirect(name, types, arg), ty.cod)
            self.codes.append(CodeUnit(f'{name}#closure', tparams, (('%arg', ty.dom),), ty.cod, body, lifted=True))
            self.adapters[key] = len(self.codes) - 1
        return self.adapters[key]

    def convert(self, e: Expr, scope: Dict[str, Tuple[Union[str, int], MLType]], tparams: Tuple[str, ...]) -> Expr:
        # scope maps a local name to ('local', type) or, inside a lifted unit, (environment slot, type)
        if isinstance(e, Var):
            if e.name in scope:
                where, _ = scope[e.name]
                if where == 'local':
                    return _typed(Var(e.name, e.span), e.ty)
                return _typed(EnvRef(where, e.name, e.span), e.ty)
            if e.name in self.globals:
                return _typed(GlobalRef(e.name, e.span), e.ty)
            return _typed(MakeClosure(self.adapter(e.name, (), e.ty, tparams), (), e.span), e.ty)
        if isinstance(e, TyApp):
            return _typed(MakeClosure(self.adapter(e.name, e.types, e.ty, tparams), (), e.span), e.ty)
        if isinstance(e, App):
            arg = self.convert(e.arg, scope, tparams)
            fn = e.fn
            if isinstance(fn, Var) and fn.name not in scope and fn.name not in self.globals:
                return _typed(CallDirect(fn.name, (), arg, e.span), e.ty)
            if isinstance(fn, TyApp):
                return _typed(CallDirect(fn.name, fn.types, arg, e.span), e.ty)
            return _typed(CallClosure(self.convert(fn, scope, tparams), arg, e.span), e.ty)
        if isinstance(e, Lam):
            bound = frozenset({e.param} if e.param is not None else ())
            free = [name for name in _free_names(e.body, bound, []) if name in scope]
            captured = tuple(self.convert(_typed(Var(name, e.span), scope[name][1]), scope, tparams)
                             for name in free)
            inner = {name: (i, scope[name][1]) for i, name in enumerate(free)}
            if e.param is not None:
                inner[e.param] = ('local', e.ptype)
            body = self.convert(e.body, inner, tparams)
            self.codes.append(CodeUnit(f'lambda{len(self.codes)}', tparams, ((e.param, e.ptype),), e.body.ty,
                                       body, captured=tuple((name, scope[name][1]) for name in free), lifted=True))
            return _typed(MakeClosure(len(self.codes) - 1, captured, e.span), e.ty)
        if isinstance(e, Let):
            value = self.convert(e.value, scope, tparams)
            body = self.convert(e.body, {**scope, e.name: ('local', e.value.ty)}, tparams)
            return _typed(Let(e.name, value, body, e.span), e.ty)
        if isinstance(e, Case):
            cases = e.value.ty.cases
            branches = tuple((name, self.convert(body, {**scope, name: ('local', case)}, tparams))
                             for (name, body), case in zip(e.branches, cases))
            return _typed(Case(self.convert(e.value, scope, tparams), branches, e.span), e.ty)
        changes = {}
        for f in fields(e):
            value = getattr(e, f.name)
            if isinstance(value, Expr):
                changes[f.name] = self.convert(value, scope, tparams)
            elif f.name == 'items':
                changes[f.name] = tuple(self.convert(item, scope, tparams) for item in value)
        return _typed(replace(e, **changes), e.ty)


def closure_convert(program: MLProgram) -> ConvertedProgram:
    """Lifts every function expression into a code unit taking its environment explicitly.

    Variables a function captures become ``EnvRef`` reads in the lifted body; top-level functions used as values get
    an adapter unit. Calls of top-level functions by name stay direct.
    """
    return _Converter(program).run()


# Annotation

def _closure_heap(dom: Type, cod: Type) -> ExHT:
    env = Type(VarT(0), UNR)
    code = Type(CodeRefT(FunType((), (env, shift(dom, Kind.TYPE)), (shift(cod, Kind.TYPE),))), UNR)
    return ExHT(UNR, SizeConst(64), Type(ProdT((env, code)), UNR))


def _unr_ref(heap) -> Type:
    return Type(ExLocT(Type(RefT(Priv.RW, LocVar(0), heap), UNR)), UNR)


def _cell_variant(payload: Type) -> Type:
    heap = VariantHT(shift((UNIT_UNR, payload), Kind.LOC))
    return Type(ExLocT(Type(RefT(Priv.RW, LocVar(0), heap), LIN)), LIN)


def _size(t: Type, scope: Sequence[Tuple[str, TypeBound]], span=None):
    try:
        return size_of(tuple(bound for _, bound in scope), t)
    except CheckError:
        _fail('a recursive type must pass through a variant before it can be stored', span)


def rw_type(t: MLType, scope: Sequence[Tuple[str, TypeBound]] = (), span=None) -> Type:
    """RichWasm type of an ML type; ``scope`` names the type variables in scope, innermost first."""
    if isinstance(t, IntTy):
        return I32_UNR
    if isinstance(t, UnitTy):
        return UNIT_UNR
    if isinstance(t, VarTy):
        names = [name for name, _ in scope]
        if t.name not in names:
            _fail(f'unbound type variable {t.name}', span)
        return Type(VarT(names.index(t.name)), UNR)
    if isinstance(t, RefTy):
        elem = rw_type(t.elem, scope, span)
        return _unr_ref(StructHT(((shift(elem, Kind.LOC), _size(elem, scope, span)),)))
    if isinstance(t, RefToLinTy):
        cell = _cell_variant(rw_type(t.elem, scope, span))
        return _unr_ref(StructHT(((shift(cell, Kind.LOC), SizeConst(32)),)))
    if isinstance(t, LinTy):
        inner = rw_type(t.inner, scope, span)
        if isinstance(inner.pre, ExLocT):
            return Type(ExLocT(Type(inner.pre.body.pre, LIN)), LIN)
        return Type(inner.pre, LIN)
    if isinstance(t, ProdTy):
        items = tuple(rw_type(c, scope, span) for c in t.items)
        return Type(ProdT(items), LIN if any(c.qual == LIN for c in items) else UNR)
    if isinstance(t, VariantTy):
        cases = tuple(rw_type(c, scope, span) for c in t.cases)
        return _unr_ref(VariantHT(shift(cases, Kind.LOC)))
    if isinstance(t, MuTy):
        return Type(RecT(UNR, rw_type(t.body, ((t.var, MU_BOUND),) + tuple(scope), span)), UNR)
    if isinstance(t, ArrowTy):
        heap = _closure_heap(rw_type(t.dom, scope, span), rw_type(t.cod, scope, span))
        return _unr_ref(shift(heap, Kind.LOC))
    _fail(f'{show_ml_type(t)} has no RichWasm representation', span)


def _environment(types: Sequence[Type], type_env: Sequence[TypeBound]) -> Tuple[Type, bool]:
    """Closure environment: an unrestricted product when it fits in 64 bits, a struct reference otherwise."""
    sizes = [size_of(type_env, t) for t in types]
    if sum(size_const(s) for s in sizes) <= 64:
        return Type(ProdT(tuple(types)), UNR), False
    fields_ = tuple(zip(shift(tuple(types), Kind.LOC), sizes))
    return _unr_ref(StructHT(fields_)), True


@dataclass(eq=False)
class AnnotatedProgram:
    program: ConvertedProgram
    func_index: Dict[str, int]
    global_index: Dict[str, int]
    code_base: int


def annotate(program: ConvertedProgram) -> AnnotatedProgram:
    """Assigns RichWasm types: every type variable gets the bound ``unr <= a``, size <= 64.

    Returns
    -------
    annotated: AnnotatedProgram
        The program with ``fun_type`` set on every unit and import, plus function and global indices.
    """
    for d in program.imports:
        scope = tuple((a, TYPE_PARAM_BOUND) for a in reversed(d.scheme.tparams))
        d.fun_type = FunType(tuple(TypeQ(UNR, SizeConst(64)) for _ in d.scheme.tparams),
                             (rw_type(d.scheme.dom, scope, d.span),), (rw_type(d.scheme.cod, scope, d.span),))
    for unit in program.units + program.codes:
        unit.type_scope = tuple((a, TYPE_PARAM_BOUND) for a in reversed(unit.tparams))
        type_env = tuple(bound for _, bound in unit.type_scope)
        ins = tuple(rw_type(t, unit.type_scope) for _, t in unit.params)
        if unit.lifted:
            captured = [rw_type(t, unit.type_scope) for _, t in unit.captured]
            unit.env_type, unit.boxed_env = _environment(captured, type_env)
            ins = (unit.env_type,) + ins
        unit.param_types = ins
        unit.fun_type = FunType(tuple(TypeQ(UNR, SizeConst(64)) for _ in unit.tparams), ins,
                                (rw_type(unit.rtype, unit.type_scope),))
    func_index = {d.name: i for i, d in enumerate(program.imports)}
    for i, unit in enumerate(program.units):
        func_index[unit.name] = len(program.imports) + i
    global_index = {name: i for i, (name, _, _) in enumerate(program.globals)}
    return AnnotatedProgram(program, func_index, global_index, len(program.imports) + len(program.units))


# Code generation

class _UnitEmitter:
    def __init__(self, annotated: AnnotatedProgram, unit: CodeUnit):
        self.annotated = annotated
        self.unit = unit
        self.b = FunctionBuilder(unit.param_types, tuple(bound for _, bound in unit.type_scope))
        self.scope: Dict[str, int] = {}
        offset = 1 if unit.lifted else 0
        for k, (name, _) in enumerate(unit.params):
            if name is not None:
                self.scope[name] = k + offset

    def rw(self, t: MLType, span=None) -> Type:
        return rw_type(t, self.unit.type_scope, span)

    def emit(self) -> Func:
        body = self.expr(self.unit.body)
        return Func(self.unit.fun_type, tuple(self.b.sizes), tuple(body), self.unit.exports)

    # helpers

    def unpacking(self, outs: Sequence[Type], body: Callable[[], list]) -> MemUnpack:
        before = self.b.snapshot()
        with self.b.binder(Kind.LOC):
            code = body()
        return MemUnpack(ArrowType((), tuple(outs)), self.b.effect(before), tuple(code))

    def variant_case(self, qual, heap, outs, arms) -> VariantCase:
        codes, effect = self.b.arms(arms)
        return VariantCase(qual, heap, ArrowType((), tuple(outs)), effect, tuple(tuple(c) for c in codes))

    def pick(self, types: Sequence[Type], index: int) -> list:
        """Keeps component ``index`` of values just ungrouped from a product."""
        slots, code = [], []
        for t in reversed(types):
            slot = self.b.fresh(t)
            code.append(self.b.set(slot, t))
            slots.insert(0, slot)
        instr, _ = self.b.get(slots[index])
        code.append(instr)
        for slot in slots:
            code += self.b.reset(slot)
        return code

    def bind(self, name: str, t: Type, body: Callable[[], list]) -> list:
        slot = self.b.fresh(t)
        code = [self.b.set(slot, t)]
        saved = self.scope.get(name)
        self.scope[name] = slot
        code += body()
        if saved is None:
            del self.scope[name]
        else:
            self.scope[name] = saved
        return code + self.b.reset(slot)

    def type_arg(self, t: MLType, span) -> PreTypeI:
        rt = self.rw(t, span)
        bits = size_const(_size(rt, self.unit.type_scope, span))
        if rt.qual != UNR or bits is None or bits > 64:
            _fail(f'type argument {show_ml_type(t)} must be unrestricted and at most 64 bits', span)
        return PreTypeI(rt.pre)

    # expressions

    def expr(self, e: Expr) -> list:
        if isinstance(e, IntLit):
            return [Const(NumKind.I32, e.value)]
        if isinstance(e, UnitLit):
            return [UnitV()]
        if isinstance(e, Var):
            instr, _ = self.b.get(self.scope[e.name])
            return [instr]
        if isinstance(e, GlobalRef):
            return [GetGlobal(self.annotated.global_index[e.name])]
        if isinstance(e, EnvRef):
            return self.env_ref(e)
        if isinstance(e, Let):
            code = self.expr(e.value)
            return code + self.bind(e.name, self.rw(e.value.ty), lambda: self.expr(e.body))
        if isinstance(e, Seq):
            return self.expr(e.first) + [Drop()] + self.expr(e.second)
        if isinstance(e, BinOp):
            op = {'+': Binop(NumKind.I32, 'add'), '-': Binop(NumKind.I32, 'sub'), '*': Binop(NumKind.I32, 'mul'),
                  '=': Relop(NumKind.I32, 'eq'), '<': Relop(NumKind.I32, 'lt')}[e.op]
            return self.expr(e.left) + self.expr(e.right) + [op]
        if isinstance(e, If):
            code = self.expr(e.cond)
            (then, else_), effect = self.b.arms([lambda: (self.expr(e.then), False),
                                                 lambda: (self.expr(e.else_), False)])
            return code + [Ite(ArrowType((), (self.rw(e.ty),)), effect, tuple(then), tuple(else_))]
        if isinstance(e, MkRef):
            t = self.rw(e.value.ty)
            return self.expr(e.value) + [StructMalloc((_size(t, self.unit.type_scope, e.span),), UNR)]
        if isinstance(e, Deref):
            return self.deref(e)
        if isinstance(e, Assign):
            return self.assign(e)
        if isinstance(e, NewCell):
            payload = self.rw(e.elem, e.span)
            return [UnitV(), VariantMalloc(0, (UNIT_UNR, payload), LIN), StructMalloc((SizeConst(32),), UNR)]
        if isinstance(e, Tuple_):
            code = []
            for item in e.items:
                code += self.expr(item)
            return code + [Group(len(e.items), self.rw(e.ty).qual)]
        if isinstance(e, Proj):
            return self.expr(e.value) + [Ungroup()] + self.pick(self.rw(e.value.ty).pre.types, e.index)
        if isinstance(e, Inj):
            cases = tuple(self.rw(c, e.span) for c in e.vtype.cases)
            return self.expr(e.value) + [VariantMalloc(e.index, cases, UNR)]
        if isinstance(e, Case):
            return self.case(e)
        if isinstance(e, Fold):
            return self.expr(e.value) + [RecFold(self.rw(e.ty, e.span).pre)]
        if isinstance(e, Unfold):
            return self.expr(e.value) + [RecUnfold()]
        if isinstance(e, MakeClosure):
            return self.make_closure(e)
        if isinstance(e, CallDirect):
            indices = tuple(self.type_arg(t, e.span) for t in e.types)
            return self.expr(e.arg) + [Call(self.annotated.func_index[e.name], indices)]
        if isinstance(e, CallClosure):
            return self.call_closure(e)
        _fail(f'unexpected {type(e).__name__} after closure conversion', getattr(e, 'span', None))

    def env_ref(self, e: EnvRef) -> list:
        instr, env_t = self.b.get(0)
        if self.unit.boxed_env:
            t = self.rw(e.ty)
            return [instr, self.unpacking((t,), lambda: [StructGet(e.index)] + self.b.drop_under(t))]
        return [instr, Ungroup()] + self.pick(env_t.pre.types, e.index)

    def deref(self, e: Deref) -> list:
        t = self.rw(e.ty, e.span)
        code = self.expr(e.target)
        if isinstance(e.target.ty, RefTy):
            return code + [self.unpacking((t,), lambda: [StructGet(0)] + self.b.drop_under(t))]
        return code + [self.unpacking((t,), lambda: self.take_cell(t))]

    def take_cell(self, t: Type) -> list:
        """Swaps Empty into a ref_to_lin cell and returns the payload, trapping if the cell was already Empty."""
        cases = (UNIT_UNR, t)
        code = [UnitV(), VariantMalloc(0, cases, LIN), StructSwap(0)] + self.b.drop_under(_cell_variant(t))
        heap = VariantHT(shift(cases, Kind.LOC))
        arms = [lambda: ([Drop(), Unreachable()], True), lambda: ([], False)]
        return code + [self.unpacking((t,), lambda: [self.variant_case(LIN, heap, (t,), arms)])]

    def put_cell(self, t: Type) -> list:
        """Swaps Full(payload) into a cell, trapping if it was already Full."""
        cases = (UNIT_UNR, t)
        code = [VariantMalloc(1, cases, LIN), StructSwap(0)] + self.b.drop_under(_cell_variant(t))
        heap = VariantHT(shift(cases, Kind.LOC))
        arms = [lambda: ([Drop()], False), lambda: ([Unreachable()], True)]
        return code + [self.unpacking((), lambda: [self.variant_case(LIN, heap, (), arms)]), UnitV()]

    def assign(self, e: Assign) -> list:
        t = self.rw(e.value.ty, e.span)
        plain = isinstance(e.target.ty, RefTy)

        def body():
            value = self.expr(e.value)
            if plain:
                return value + [StructSet(0), Drop(), UnitV()]
            return value + self.put_cell(t)

        return self.expr(e.target) + [self.unpacking((UNIT_UNR,), body)]

    def case(self, e: Case) -> list:
        cases = tuple(self.rw(c) for c in e.value.ty.cases)
        t = self.rw(e.ty)
        heap = VariantHT(shift(cases, Kind.LOC))

        def arm(name, case_type, branch):
            return lambda: (self.bind(name, case_type, lambda: self.expr(branch)), False)

        def body():
            arms = [arm(name, c, branch) for (name, branch), c in zip(e.branches, cases)]
            return [self.variant_case(UNR, heap, (t,), arms)] + self.b.drop_under(t)

        return self.expr(e.value) + [self.unpacking((t,), body)]

    def make_closure(self, e: MakeClosure) -> list:
        code_unit = self.annotated.program.codes[e.code]
        code = []
        for c in e.captured:
            code += self.expr(c)
        if code_unit.boxed_env:
            sizes = tuple(_size(self.rw(t), self.unit.type_scope) for _, t in code_unit.captured)
            code.append(StructMalloc(sizes, UNR))
        else:
            code.append(Group(len(e.captured), UNR))
        code.append(CodeRefI(e.code))
        if code_unit.tparams:
            names = [name for name, _ in self.unit.type_scope]
            code.append(Inst(tuple(PreTypeI(VarT(names.index(a))) for a in code_unit.tparams)))
        heap = _closure_heap(self.rw(e.ty.dom), self.rw(e.ty.cod))
        return code + [Group(2, UNR), ExistPack(code_unit.env_type.pre, heap, UNR)]

    def call_closure(self, e: CallClosure) -> list:
        dom, cod = self.rw(e.fn.ty.dom), self.rw(e.fn.ty.cod)
        heap = shift(_closure_heap(dom, cod), Kind.LOC)
        code = self.expr(e.arg)
        arg_slot = self.b.fresh(dom)
        code.append(self.b.set(arg_slot, dom))
        code += self.expr(e.fn)

        def open_package():
            code_t = heap.body.pre.types[1]
            tmp = self.b.fresh(code_t)
            body = [Ungroup(), self.b.set(tmp, code_t)]
            get_arg, _ = self.b.get(arg_slot)
            get_code, _ = self.b.get(tmp)
            return body + [get_arg, get_code, CallIndirect()] + self.b.reset(tmp) + self.b.reset(arg_slot)

        def open_location():
            before = self.b.snapshot()
            with self.b.binder(Kind.TYPE, TYPE_PARAM_BOUND):
                body = open_package()
            unpack = ExistUnpack(UNR, heap, ArrowType((), (cod,)), self.b.effect(before), tuple(body))
            return [unpack] + self.b.drop_under(cod)

        return code + [self.unpacking((cod,), open_location)]


def codegen_ml(annotated: AnnotatedProgram) -> RWModule:
    """Emits the RichWasm module: imports, then top-level functions, global initializers and ``main``, then the
    lifted code units, which also make up the table."""
    program = annotated.program
    funcs = [FuncImport(d.module, d.name, d.fun_type) for d in program.imports]
    funcs += [_UnitEmitter(annotated, unit).emit() for unit in program.units]
    funcs += [_UnitEmitter(annotated, unit).emit() for unit in program.codes]
    globals_ = []
    for name, t, init in program.globals:
        pre = rw_type(t).pre
        globals_.append(Global(False, pre, (Call(annotated.func_index[init]),)))
    table = Table(tuple(annotated.code_base + k for k in range(len(program.codes))))
    return RWModule(tuple(funcs), tuple(globals_), table)


def compile_ml(text: str, file: str = '<input>', check: bool = True) -> RWModule:
    """Runs the whole pipeline on ML source text

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

    Raises
    ------
    ParseError, FrontendError
        For malformed or ill-typed ML.
    CheckError
        When the RichWasm checker rejects the result, e.g. a linear value used twice.
    """
    module = codegen_ml(annotate(closure_convert(typecheck_ml(parse_ml(text, file)))))
    if check:
        check_module(module)
    logger.info('compiled %s: %d functions, %d globals', file, len(module.funcs), len(module.globals))
    return module
