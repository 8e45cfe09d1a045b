"""Privacy-preserving range queries over an outsourced, attribute-wise encrypted table.

A data owner encrypts an integer table under an additively homomorphic key
and hands it to a primary cloud.  An authorized user can then retrieve
exactly the records whose k-th attribute lies in a private range, while the
two non-colluding clouds learn neither the query bounds, the data, nor which
stored rows matched.
"""

from .paillier import (
    Ciphertext,
    KeyShare,
    PartialDecryption,
    PublicKey,
    SecretKey,
    combine,
    decrypt,
    encrypt,
    hom_add,
    keygen,
    partial_decrypt,
    scalar_mul,
    threshold_keygen,
)
from .protocols import ComparisonResult, Orientation, run_compare, run_multiply
from .query import RangeQuery, execute_query, generate_user_keypair, split_query
from .store import EncryptedTable, PlainTable, encrypt_table, ingest_csv, load_table, save_table

__version__ = "0.1.0"

__all__ = [
    "Ciphertext",
    "ComparisonResult",
    "EncryptedTable",
    "KeyShare",
    "Orientation",
    "PartialDecryption",
    "PlainTable",
    "PublicKey",
    "RangeQuery",
    "SecretKey",
    "combine",
    "decrypt",
    "encrypt",
    "encrypt_table",
    "execute_query",
    "generate_user_keypair",
    "hom_add",
    "ingest_csv",
    "keygen",
    "load_table",
    "partial_decrypt",
    "run_compare",
    "run_multiply",
    "save_table",
    "scalar_mul",
    "split_query",
    "threshold_keygen",
    "__version__",
]
