"""Deterministic stand-in for emulated firmware.

Runs a scenario script, one directive per line (``#`` starts a comment)::

    print <text>                 write <text> to stdout at startup
    eprint <text>                write <text> to stderr at startup
    tick <task> <exec> [<ddl>]   emit "TICK task=<task> exec_ms=<exec> deadline_ms=<ddl>" (ddl defaults to 10)
    sleep <ms>                   pause at startup
    crash <code|SIGNAME>         terminate immediately with an exit code or signal
    echo                         copy every input line back to stdout
    overflow-over <n>            print an OVERFLOW line for every input line longer than n bytes
    crash-over <n> <code|SIG>    crash on the first input line longer than n bytes
    hang-after <n>               stop producing output for good after n input lines
    ignore-signals               ignore SIGTERM, SIGINT and SIGHUP

Startup directives run in file order; mode directives configure the input
loop, which reads stdin line by line until EOF and then exits with status 0.

Standard library only: the harness launches this file with ``python -I -S``.
"""

import os
import signal
import sys
import time

OVERFLOW_LINE = "OVERFLOW: buffer overrun in input handler (limit {n} bytes)"


def _out(stream, text):
    stream.write(text + "\n")
    stream.flush()


def _terminate(spec):
    sys.stdout.flush()
    sys.stderr.flush()
    if spec.upper().startswith("SIG"):
        signum = getattr(signal, spec.upper())
        signal.signal(signum, signal.SIG_DFL)
        os.kill(os.getpid(), signum)
        time.sleep(1)
    os._exit(int(spec))


def _hang():
    while True:
        time.sleep(3600)


def parse(text):
    directives = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        word, _, rest = line.partition(" ")
        directives.append((lineno, word, rest.strip()))
    return directives


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: stub.py SCENARIO", file=sys.stderr)
        return 64
    with open(argv[0], encoding="utf-8") as fh:
        directives = parse(fh.read())

    echo = False
    overflow_over = None
    crash_over = None
    hang_after = None
    for lineno, word, rest in directives:
        args = rest.split()
        if word == "print":
            _out(sys.stdout, rest)
        elif word == "eprint":
            _out(sys.stderr, rest)
        elif word == "tick":
            deadline = args[2] if len(args) > 2 else "10"
            _out(sys.stdout, "TICK task=%s exec_ms=%s deadline_ms=%s" % (args[0], args[1], deadline))
        elif word == "sleep":
            time.sleep(float(args[0]) / 1000.0)
        elif word == "crash":
            _terminate(args[0])
        elif word == "echo":
            echo = True
        elif word == "overflow-over":
            overflow_over = int(args[0])
        elif word == "crash-over":
            crash_over = (int(args[0]), args[1])
        elif word == "hang-after":
            hang_after = int(args[0])
        elif word == "ignore-signals":
            for sig in (signal.SIGTERM, signal.SIGINT, signal.SIGHUP):
                signal.signal(sig, signal.SIG_IGN)
        else:
            print("stub: line %d: unknown directive %r" % (lineno, word), file=sys.stderr)
            return 65

    seen = 0
    stdin = sys.stdin.buffer
    while True:
        if hang_after is not None and seen >= hang_after:
            _hang()
        line = stdin.readline()
        if not line:
            break
        seen += 1
        payload = line[:-1] if line.endswith(b"\n") else line
        if crash_over is not None and len(payload) > crash_over[0]:
            _terminate(crash_over[1])
        if overflow_over is not None and len(payload) > overflow_over:
            _out(sys.stdout, OVERFLOW_LINE.format(n=overflow_over))
        if echo:
            sys.stdout.buffer.write(payload + b"\n")
            sys.stdout.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
