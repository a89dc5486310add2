"""Start both key-value servers in-process and drive each with the load client."""

from trustee.kvstore.client import ClientConfig, load_client
from trustee.kvstore.server import KVServer, ServerConfig


def main() -> None:
    for mode in ("trust", "locks"):
        with KVServer(ServerConfig(port=0, workers=2, trustees=2, mode=mode)) as srv:
            host, port = srv.address
            stats = load_client(ClientConfig(host=host, port=port, threads=4, pipeline=16, keys=500, seconds=1.0))
            print(
                f"{mode:>5}: {stats.throughput:,.0f} ops/s, {stats.total_ops} ops, "
                f"linearizable={not stats.violations}, bijection={stats.bijection_ok}"
            )


if __name__ == "__main__":
    main()
