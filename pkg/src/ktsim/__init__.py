"""Key-transparency log, fake-key-attack defenses, and adversarial simulator.

Modules
-------
crypto      tagged hashing, Ed25519 signing, canonical field framing
tree        Merkle binary prefix tree and inclusion proofs
artifacts   signed tree roots, key responses, proofs of misbehavior
server      honest key-server role plus the pluggable adversary
client      per-client defense state machines (KTCA / AKM / KTACA)
simnet      deterministic discrete-event engine, topology, churn, anonymity
scenario    scenario configs (TOML / JSON) and validation
predict     closed-form detection probabilities and time bounds
accounting  traffic/memory accounting report
runner      single runs and Monte-Carlo batches
cli         command-line entry point
"""

__version__ = "0.1.0"
