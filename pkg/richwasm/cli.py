"""Command-line driver: ``richwasm check|run|lower|compile-ml|compile-l3|link|fuzz``.

Module arguments are file paths, optionally prefixed with the name the module is linked under (``ml=stash.mlx``);
the default name is the file stem. The file extension picks the reader: ``.rwasm`` for RichWasm text, ``.mlx``
for ML and ``.l3`` for L³. Exit codes: 0 success, 1 diagnostics or a trapping run, 2 usage errors, 3 internal
errors.
"""
import argparse
import logging
import os
import subprocess
import sys
import tempfile
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from richwasm.core.interp import DEFAULT_COLLECT_EVERY, DEFAULT_FUEL, find_export, instantiate, invoke
from richwasm.core.ir import Const, FuncImport, NumKind, RWModule, UnitV
from richwasm.core.lower import lower_program, rich_results, wasm_args
from richwasm.core.syntax import parse_module_with_spans, print_module, show_instr
from richwasm.core.typecheck import check_link, check_module
from richwasm.core.wasm import emit_wasm_binary, emit_wat
from richwasm.core.wasm_exec import run_export
from richwasm.frontend.l3 import compile_l3
from richwasm.frontend.ml import compile_ml
from richwasm.fuzz import GenConfig, fuzz_safety
from richwasm.util.utils import (Diagnostic, InterpreterFault, RichWasmError, configure_logging, error)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_DIAGNOSTICS = 1
EXIT_USAGE = 2
EXIT_INTERNAL = 3

ENGINE_VARIABLE = 'RW_WASM_ENGINE'


class UsageError(Exception):
    pass


def split_module_arg(arg: str) -> Tuple[str, Path]:
    name, sep, path = arg.partition('=')
    if not sep:
        return Path(arg).stem, Path(arg)
    return name, Path(path)


def load_module(path: Path, check: bool = True) -> RWModule:
    """Reads one module from ``path``, compiling ML and L³ sources."""
    if not path.is_file():
        raise UsageError(f'{path}: no such file')
    text = path.read_text()
    suffix = path.suffix
    if suffix == '.mlx':
        return compile_ml(text, str(path), check=check)
    if suffix == '.l3':
        return compile_l3(text, str(path), check=check)
    if suffix == '.rwasm':
        module, spans = parse_module_with_spans(text, str(path))
        if check:
            check_module(module, spans)
        return module
    raise UsageError(f'{path}: unknown file type {suffix!r} (expected .rwasm, .mlx or .l3)')


def load_modules(args: Sequence[str]) -> List[Tuple[str, RWModule]]:
    """Loads and checks every module, collecting the diagnostics of all of them before failing."""
    modules, diagnostics = [], []
    for arg in args:
        name, path = split_module_arg(arg)
        try:
            modules.append((name, load_module(path)))
            logger.info('checked %s as module %s', path, name)
        except RichWasmError as exc:
            diagnostics += exc.diagnostics
    if diagnostics:
        raise RichWasmError(diagnostics)
    return modules


def parse_value(text: str):
    """An argument value: ``unit``, ``KIND:N`` (e.g. ``i64:5``) or a plain integer (i32)."""
    if text == 'unit':
        return UnitV()
    kind, sep, number = text.partition(':')
    if not sep:
        kind, number = 'i32', text
    try:
        num = NumKind(kind)
        return Const(num, float(number) if num.is_float else int(number))
    except ValueError:
        raise UsageError(f'cannot read argument {text!r}')


def show_value(v) -> str:
    if isinstance(v, Const):
        return str(v.value)
    if v is None:
        return '<address>'
    return show_instr(v)


def entry_type(modules: Sequence[Tuple[str, RWModule]], entry: str):
    for _, m in reversed(modules):
        for f in m.funcs:
            if entry in f.exports and not isinstance(f, FuncImport):
                return f.type
    raise UsageError(f'no module exports a function named {entry}')


def run_engine(engine: str, binary: bytes, entry: str, args: Sequence) -> Tuple[str, Tuple]:
    """Runs a Wasm binary with an external engine that accepts ``ENGINE --invoke ENTRY FILE ARGS...`` and prints
    one result per line."""
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / 'program.wasm'
        path.write_bytes(binary)
        proc = subprocess.run([engine, '--invoke', entry, str(path)] + [str(a) for a in args],
                              capture_output=True, text=True)
    if proc.returncode != 0:
        logger.debug('%s failed: %s', engine, proc.stderr.strip())
        return 'trap', ()
    return 'done', tuple(int(word) for word in proc.stdout.split())


# Commands

def cmd_check(opts) -> int:
    modules = load_modules(opts.modules)
    if len(modules) > 1:
        check_link(modules)
    for name, m in modules:
        print(f'{name}: ok ({len(m.funcs)} functions, {len(m.globals)} globals)')
    return EXIT_OK


def cmd_run(opts) -> int:
    modules = load_modules(opts.modules)
    store = instantiate(modules, fuel=opts.fuel)
    find_export(store, opts.entry)
    args = [parse_value(a) for a in opts.args]
    result = invoke(store, opts.entry, args, fuel=opts.fuel, collect_every=opts.collect_every, trace=opts.trace)
    if opts.trace:
        for line in result.trace:
            print(line)
    if result.status == 'trap':
        print('TRAP')
        return EXIT_DIAGNOSTICS
    if result.status == 'out_of_fuel':
        print(f'OUT OF FUEL after {result.steps} steps')
        return EXIT_DIAGNOSTICS
    for v in result.values:
        print(show_value(v))
    return EXIT_OK


def cmd_lower(opts) -> int:
    modules = load_modules(opts.modules)
    w = lower_program(modules)
    out = Path(opts.output) if opts.output else None
    if out is not None and out.suffix == '.wasm':
        out.write_bytes(emit_wasm_binary(w))
    elif out is not None:
        out.write_text(emit_wat(w))
    else:
        sys.stdout.write(emit_wat(w))
    if not opts.run:
        return EXIT_OK
    ft = entry_type(modules, opts.entry)
    args = wasm_args([parse_value(a) for a in opts.args])
    engine = os.environ.get(ENGINE_VARIABLE)
    if engine:
        status, words = run_engine(engine, emit_wasm_binary(w), opts.entry, args)
    else:
        status, words = run_export(w, opts.entry, args)
    if status != 'done':
        print('TRAP' if status == 'trap' else 'OUT OF FUEL')
        return EXIT_DIAGNOSTICS
    for v in rich_results(ft.outs, words):
        print(show_value(v))
    return EXIT_OK


def _compile(opts, compiler) -> int:
    path = Path(opts.source)
    if not path.is_file():
        raise UsageError(f'{path}: no such file')
    module = compiler(path.read_text(), str(path))
    text = print_module(module)
    if opts.output:
        Path(opts.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_compile_ml(opts) -> int:
    return _compile(opts, compile_ml)


def cmd_compile_l3(opts) -> int:
    return _compile(opts, compile_l3)


def cmd_link(opts) -> int:
    modules = load_modules(opts.modules)
    store = instantiate(modules, fuel=opts.fuel)
    for instance in store.instances:
        exports = [e for f in instance.module.funcs for e in f.exports]
        print(f'{instance.name}: {", ".join(exports) if exports else "(no exports)"}')
    return EXIT_OK


def cmd_fuzz(opts) -> int:
    cfg = GenConfig(seed=opts.seed, max_depth=opts.max_depth, max_locations=opts.max_locations,
                    max_instructions=opts.max_instructions, collect_interval=opts.collect_every)
    report = fuzz_safety(cfg, opts.count, fuel=opts.fuel)
    failed = report[report['progress_violation'] | report['preservation_violation']]
    if opts.json:
        sys.stdout.write(report.to_json(orient='records', lines=True))
        sys.stdout.write('\n')
    else:
        print(report['status'].value_counts().to_string())
        print(f'{len(report)} programs, {int(report["progress_violation"].sum())} progress violations, '
              f'{int(report["preservation_violation"].sum())} preservation violations')
        if len(failed):
            print(failed[['seed', 'index', 'detail']].to_string(index=False))
    return EXIT_DIAGNOSTICS if len(failed) else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='richwasm', description='RichWasm checker, interpreter, lowering and '
                                                                  'frontends')
    parser.add_argument('-v', '--verbose', action='count', default=0, help='more logging (repeatable)')
    parser.add_argument('--json', action='store_true', help='print diagnostics as JSON lines')
    commands = parser.add_subparsers(dest='command', required=True)

    def modules_command(name, handler, help_text):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument('modules', nargs='+', metavar='[NAME=]FILE')
        sub.set_defaults(handler=handler)
        return sub

    modules_command('check', cmd_check, 'type check modules and their links')
    run = modules_command('run', cmd_run, 'run an exported function in the interpreter')
    run.add_argument('--entry', default='main')
    run.add_argument('--args', nargs='*', default=[], help='argument values: unit, KIND:N or N')
    run.add_argument('--fuel', type=int, default=DEFAULT_FUEL)
    run.add_argument('--collect-every', type=int, default=DEFAULT_COLLECT_EVERY)
    run.add_argument('--trace', action='store_true', help='print one line per reduction')
    lower = modules_command('lower', cmd_lower, 'lower modules to one Wasm module')
    lower.add_argument('-o', '--output', help='output file; .wasm writes the binary format')
    lower.add_argument('--run', action='store_true', help=f'run the entry point; uses ${ENGINE_VARIABLE} if set')
    lower.add_argument('--entry', default='main')
    lower.add_argument('--args', nargs='*', default=[])
    link = modules_command('link', cmd_link, 'link modules and run their global initializers')
    link.add_argument('--fuel', type=int, default=DEFAULT_FUEL)
    for name, handler in (('compile-ml', cmd_compile_ml), ('compile-l3', cmd_compile_l3)):
        sub = commands.add_parser(name, help=f'compile a {name[8:].upper()} source file to RichWasm text')
        sub.add_argument('source')
        sub.add_argument('-o', '--output')
        sub.set_defaults(handler=handler)
    fuzz = commands.add_parser('fuzz', help='check progress and preservation on generated programs')
    fuzz.add_argument('--seed', type=int, default=0)
    fuzz.add_argument('--count', type=int, default=100)
    fuzz.add_argument('--max-depth', type=int, default=3)
    fuzz.add_argument('--max-locations', type=int, default=4)
    fuzz.add_argument('--max-instructions', type=int, default=12)
    fuzz.add_argument('--collect-every', type=int, default=64)
    fuzz.add_argument('--fuel', type=int, default=10_000)
    fuzz.set_defaults(handler=cmd_fuzz)
    return parser


def report(diagnostics: Sequence[Diagnostic], as_json: bool) -> None:
    for d in diagnostics:
        if as_json:
            print(d.to_json())
        else:
            print(d, file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    opts = parser.parse_args(argv)
    configure_logging(opts.verbose)
    try:
        return opts.handler(opts)
    except RichWasmError as exc:
        report(exc.diagnostics, opts.json)
        return EXIT_DIAGNOSTICS
    except UsageError as exc:
        report([error('CLI001', str(exc))], opts.json)
        return EXIT_USAGE
    except InterpreterFault as exc:
        logger.error('internal error: %s', exc)
        return EXIT_INTERNAL
    except Exception:
        logger.exception('internal error')
        return EXIT_INTERNAL


if __name__ == '__main__':
    sys.exit(main())
