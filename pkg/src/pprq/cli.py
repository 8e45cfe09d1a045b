"""Command-line tools: owner, user, the two cloud daemons, and a bench harness.

Exit codes: 0 success, 1 usage error, 2 protocol/crypto error, 3 I/O error.
Every flag can also come from a shared config file (see `pprq.config`);
explicit flags win.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import random
import sys
from pathlib import Path

from . import bench as bench_mod
from . import paillier
from .config import Config, ConfigError
from .net import (
    PrimaryCloudDaemon,
    SecondaryCloudDaemon,
    TransportError,
    parse_address,
    run_remote_query,
)
from .protocols import ProtocolError
from .query import QueryRejected, RangeQuery, generate_user_keypair
from .store import TableError, encrypt_table, ingest_csv, load_table, save_table

EXIT_OK, EXIT_USAGE, EXIT_PROTOCOL, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("pprq")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


class UsageError(Exception):
    pass


class _Settings:
    """Flag-over-config resolution for one tool scope."""

    def __init__(self, args: argparse.Namespace, scope: str):
        self.args = args
        self.scope = scope
        self.config = Config.load(args.config) if getattr(args, "config", None) else Config()

    def get(self, name: str, default=None):
        value = getattr(self.args, name, None)
        if value is not None:
            return value
        raw = self.config.get(self.scope, name)
        return raw if raw is not None else default

    def get_int(self, name: str, default=None):
        value = self.get(name, default)
        if value is None or isinstance(value, int):
            return value
        try:
            return int(value)
        except ValueError:
            raise UsageError(f"--{name.replace('_', '-')} must be an integer") from None

    def get_bool(self, name: str) -> bool:
        value = self.get(name)
        if value is None:
            return False
        if isinstance(value, bool):
            return value
        return str(value).strip().lower() in ("1", "true", "yes", "on")

    def require(self, name: str):
        value = self.get(name)
        if value is None:
            raise UsageError(f"missing --{name.replace('_', '-')} (or config key '{name}')")
        return value

    def allowlist(self) -> set[str] | None:
        value = getattr(self.args, "allow", None)
        if value is None:
            listed = self.config.get_list(self.scope, "allow")
            if listed is None:
                return None
            return set(listed)
        return {item.strip() for item in value.split(",") if item.strip()}

    def daemon_rng(self) -> random.Random:
        seed = self.get_int("unsafe_seed")
        if seed is None:
            return random.SystemRandom()
        log.warning(
            "UNSAFE: daemon running with a deterministic seed (%d); test use only", seed
        )
        return random.Random(seed)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE", help="shared key-value config file")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pprq", description=__doc__.splitlines()[0])
    tools = parser.add_subparsers(dest="tool", required=True)

    owner = tools.add_parser("owner", help="data-owner tool: keys and table encryption")
    owner_cmds = owner.add_subparsers(dest="command", required=True)
    keygen = owner_cmds.add_parser("keygen", help="generate key material")
    keygen.add_argument("--bits", type=int, help="modulus size: 512, 1024, or 2048")
    keygen.add_argument("--mode", choices=("standard", "threshold"))
    keygen.add_argument("--out", metavar="DIR", help="output directory for key files")
    keygen.add_argument("--seed", type=int, help="deterministic keys (tests only)")
    _add_common(keygen)
    enc = owner_cmds.add_parser("encrypt", help="encrypt a CSV into a table file")
    enc.add_argument("--csv", metavar="FILE")
    enc.add_argument("--m", type=int, help="attribute domain bit length")
    enc.add_argument("--pk", metavar="FILE", help="table public key")
    enc.add_argument("--out", metavar="FILE", help="output .pprq table")
    enc.add_argument("--seed", type=int, help="deterministic nonces (tests only)")
    _add_common(enc)

    user = tools.add_parser("user", help="query tool")
    user_cmds = user.add_subparsers(dest="command", required=True)
    q = user_cmds.add_parser("query", help="run one range query")
    q.add_argument("--k", type=int, help="attribute index, 1-based")
    q.add_argument("--alpha", type=int, help="lower bound (inclusive)")
    q.add_argument("--beta", type=int, help="upper bound (inclusive)")
    q.add_argument("--protocol", type=int, choices=(1, 2))
    q.add_argument("--c1", metavar="HOST:PORT")
    q.add_argument("--c2", metavar="HOST:PORT")
    q.add_argument("--keys", metavar="DIR", help="directory with pk.ppqk (and cached user keys)")
    q.add_argument("--user-id", dest="user_id")
    q.add_argument("--sort", action="store_true", default=None,
                   help="sort output by the queried attribute")
    q.add_argument("--timeout", type=float)
    _add_common(q)

    c1 = tools.add_parser("cloud1", help="primary cloud daemon (stores the table)")
    c1_cmds = c1.add_subparsers(dest="command", required=True)
    c1s = c1_cmds.add_parser("serve")
    c1s.add_argument("--table", metavar="FILE")
    c1s.add_argument("--listen", metavar="HOST:PORT")
    c1s.add_argument("--peer", metavar="HOST:PORT", help="secondary cloud address")
    c1s.add_argument("--share", metavar="FILE", help="key share 1, required for protocol 2")
    c1s.add_argument("--allow", help="comma-separated authorized user ids")
    c1s.add_argument("--parallelism", type=int, help="subprotocol instances in flight")
    c1s.add_argument("--unsafe-seed", dest="unsafe_seed", type=int)
    c1s.add_argument("--timeout", type=float)
    _add_common(c1s)

    c2 = tools.add_parser("cloud2", help="secondary cloud daemon (holds decryption keys)")
    c2_cmds = c2.add_subparsers(dest="command", required=True)
    c2s = c2_cmds.add_parser("serve")
    c2s.add_argument("--listen", metavar="HOST:PORT")
    c2s.add_argument("--sk", metavar="FILE", help="full secret key, for protocol 1")
    c2s.add_argument("--share", metavar="FILE", help="key share 2, for protocol 2")
    c2s.add_argument("--allow")
    c2s.add_argument("--unsafe-seed", dest="unsafe_seed", type=int)
    c2s.add_argument("--timeout", type=float)
    _add_common(c2s)

    b = tools.add_parser("bench", help="performance and correctness harness")
    b_cmds = b.add_subparsers(dest="command", required=True)
    bsc = b_cmds.add_parser("sc", help="sweep the comparison subprotocol")
    bsc.add_argument("--m-list", dest="m_list", help="comma-separated domain sizes")
    bsc.add_argument("--bits", type=int)
    bsc.add_argument("--trials", type=int)
    bsc.add_argument("--seed", type=int)
    bsc.add_argument("--out", metavar="DIR", help="write sc_times.csv and sc_times.png here")
    _add_common(bsc)

    return parser


def _load_key_typed(path, expected, description):
    key = paillier.load_key(path)
    if not isinstance(key, expected):
        raise UsageError(f"{path} does not hold {description}")
    return key


def _cmd_owner_keygen(settings: _Settings) -> int:
    bits = settings.get_int("bits", 1024)
    mode = settings.get("mode", "standard")
    out_dir = Path(settings.require("out"))
    seed = settings.get_int("seed")
    rng = random.Random(seed) if seed is not None else random.SystemRandom()
    out_dir.mkdir(parents=True, exist_ok=True)
    check_rng = random.SystemRandom()
    if mode == "standard":
        pk, sk = paillier.keygen(bits, rng)
        probe = check_rng.randrange(pk.n)
        if paillier.decrypt(sk, paillier.encrypt(pk, probe)) != probe:
            raise ProtocolError("generated keypair failed its roundtrip self-test")
        paillier.save_key(out_dir / "pk.ppqk", pk)
        paillier.save_key(out_dir / "sk.ppqk", sk)
        written = ["pk.ppqk", "sk.ppqk"]
    elif mode == "threshold":
        pk, share1, share2 = paillier.threshold_keygen(bits, rng)
        probe = check_rng.randrange(pk.n)
        cipher = paillier.encrypt(pk, probe)
        combined = paillier.combine(
            pk, paillier.partial_decrypt(share1, cipher), paillier.partial_decrypt(share2, cipher)
        )
        if combined != probe:
            raise ProtocolError("generated key shares failed their roundtrip self-test")
        paillier.save_key(out_dir / "pk.ppqk", pk)
        paillier.save_key(out_dir / "share1.ppqk", share1)
        paillier.save_key(out_dir / "share2.ppqk", share2)
        written = ["pk.ppqk", "share1.ppqk", "share2.ppqk"]
    else:
        raise UsageError(f"unknown mode {mode!r}")
    print(f"wrote {', '.join(written)} under {out_dir} ({bits}-bit modulus)")
    return EXIT_OK


def _cmd_owner_encrypt(settings: _Settings) -> int:
    csv_path = settings.require("csv")
    m = settings.get_int("m")
    if m is None:
        raise UsageError("missing --m (attribute domain bit length)")
    pk = _load_key_typed(settings.require("pk"), paillier.PublicKey, "a public key")
    out = settings.require("out")
    seed = settings.get_int("seed")
    rng = random.Random(seed) if seed is not None else random.SystemRandom()
    table = encrypt_table(pk, ingest_csv(csv_path, m), rng)
    save_table(out, table)
    print(f"encrypted {table.n} x {table.w} table (m={m}) into {out}")
    return EXIT_OK


def _user_keypair(keys_dir: Path, table_pk: paillier.PublicKey):
    """Load the cached user keypair, regenerating when absent or too small."""
    pk_path, sk_path = keys_dir / "user_pk.ppqk", keys_dir / "user_sk.ppqk"
    if pk_path.exists() and sk_path.exists():
        user_pk = _load_key_typed(pk_path, paillier.PublicKey, "a public key")
        user_sk = _load_key_typed(sk_path, paillier.SecretKey, "a secret key")
        if user_pk.n > table_pk.n:
            return user_pk, user_sk
        log.warning("cached user key is not larger than the table modulus; regenerating")
    user_pk, user_sk = generate_user_keypair(table_pk)
    paillier.save_key(pk_path, user_pk)
    paillier.save_key(sk_path, user_sk)
    return user_pk, user_sk


def _cmd_user_query(settings: _Settings) -> int:
    k = settings.get_int("k")
    alpha = settings.get_int("alpha")
    beta = settings.get_int("beta")
    if None in (k, alpha, beta):
        raise UsageError("--k, --alpha, and --beta are required")
    proto = settings.get_int("protocol", 1)
    c1_addr = parse_address(settings.require("c1"))
    c2_addr = parse_address(settings.require("c2"))
    keys_dir = Path(settings.get("keys", "."))
    user_id = settings.get("user_id", os.environ.get("USER", "user"))
    timeout = float(settings.get("timeout", 120.0))
    if alpha > beta:
        print("warning: alpha > beta never matches; expect an empty result", file=sys.stderr)
    table_pk = _load_key_typed(keys_dir / "pk.ppqk", paillier.PublicKey, "a public key")
    user_keys = _user_keypair(keys_dir, table_pk) if proto == 1 else None

    result = run_remote_query(
        RangeQuery(k, alpha, beta),
        proto,
        c1_addr,
        c2_addr,
        user_id=user_id,
        table_pk=table_pk,
        user_keys=user_keys,
        timeout=timeout,
    )
    for warning in result.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    records = result.records
    if settings.get_bool("sort"):
        records = sorted(records, key=lambda row: row[k - 1])
    writer = csv.writer(sys.stdout)
    for row in records:
        writer.writerow(row)
    log.info("%d records, %d local decryptions", len(records), result.decrypt_count)
    return EXIT_OK


def _cmd_cloud1_serve(settings: _Settings) -> int:
    table = load_table(settings.require("table"))
    listen = parse_address(settings.require("listen"))
    peer = parse_address(settings.require("peer"))
    share_path = settings.get("share")
    share = None
    if share_path:
        share = _load_key_typed(share_path, paillier.KeyShare, "a key share")
        if share.index != 1 or share.n != table.n_modulus:
            raise UsageError("cloud1 needs share index 1 matching the table modulus")
    window = settings.get_int("parallelism", os.cpu_count() or 1)
    daemon = PrimaryCloudDaemon(
        table,
        listen,
        peer,
        share=share,
        allowlist=settings.allowlist(),
        window=window,
        rng=settings.daemon_rng(),
        timeout=float(settings.get("timeout", 120.0)),
    )
    log.info(
        "primary cloud: %d x %d table, m=%d, listening on %s:%d, peer %s:%d",
        table.n, table.w, table.m, *listen, *peer,
    )
    daemon.serve_forever()
    return EXIT_OK


def _cmd_cloud2_serve(settings: _Settings) -> int:
    listen = parse_address(settings.require("listen"))
    sk_path, share_path = settings.get("sk"), settings.get("share")
    if bool(sk_path) == bool(share_path):
        raise UsageError("provide exactly one of --sk (protocol 1) or --share (protocol 2)")
    if sk_path:
        key = _load_key_typed(sk_path, paillier.SecretKey, "a secret key")
    else:
        key = _load_key_typed(share_path, paillier.KeyShare, "a key share")
        if key.index != 2:
            raise UsageError("cloud2 needs share index 2")
    daemon = SecondaryCloudDaemon(
        key,
        listen,
        allowlist=settings.allowlist(),
        rng=settings.daemon_rng(),
        timeout=float(settings.get("timeout", 120.0)),
    )
    log.info("secondary cloud listening on %s:%d", *listen)
    daemon.serve_forever()
    return EXIT_OK


def _cmd_bench_sc(settings: _Settings) -> int:
    m_list_raw = settings.get("m_list", "20,40,60,80,100")
    try:
        m_list = [int(item) for item in str(m_list_raw).split(",") if item.strip()]
    except ValueError:
        raise UsageError("--m-list must be comma-separated integers") from None
    bits = settings.get_int("bits", 1024)
    trials = settings.get_int("trials", 20)
    seed = settings.get_int("seed")
    rng = random.Random(seed) if seed is not None else random.SystemRandom()
    points = bench_mod.run_sweep(bits, m_list, trials, rng)
    bench_mod.write_csv(points, sys.stdout)
    out_dir = settings.get("out")
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sc_times.csv", "w", newline="") as fh:
            bench_mod.write_csv(points, fh)
        bench_mod.render_figure(points, out / "sc_times.png", bits)
        print(f"wrote {out / 'sc_times.csv'} and {out / 'sc_times.png'}", file=sys.stderr)
    return EXIT_OK


_COMMANDS = {
    ("owner", "keygen"): _cmd_owner_keygen,
    ("owner", "encrypt"): _cmd_owner_encrypt,
    ("user", "query"): _cmd_user_query,
    ("cloud1", "serve"): _cmd_cloud1_serve,
    ("cloud2", "serve"): _cmd_cloud2_serve,
    ("bench", "sc"): _cmd_bench_sc,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    scope = args.tool if args.tool != "bench" else "bench"
    try:
        settings = _Settings(args, scope)
        return _COMMANDS[(args.tool, args.command)](settings)
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TableError, paillier.KeyFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (QueryRejected, ProtocolError, TransportError, paillier.PaillierError) as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


def owner_main() -> int:
    return main(["owner", *sys.argv[1:]])


def user_main() -> int:
    return main(["user", *sys.argv[1:]])


def cloud1_main() -> int:
    return main(["cloud1", *sys.argv[1:]])


def cloud2_main() -> int:
    return main(["cloud2", *sys.argv[1:]])


if __name__ == "__main__":
    sys.exit(main())
