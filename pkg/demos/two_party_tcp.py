"""
Running the two parties over TCP
================================

The social holder listens on a local port and answers product requests; the
rating holder connects, trains, and finally tells the server to stop.  Only
masked shares and the social party's output share cross the socket.
"""

import threading

from sesorec import FixedPointConfig, Hyperparams, MaskPolicy, SecureProductClient, SocialPartyServer, train
from sesorec.sharing import MaskSource
from sesorec.synthetic import make_social_ratings
from sesorec.transport import tcp_pair

ratings, graph, _ = make_social_ratings(n_users=60, n_items=50, n_ratings=800, n_edges=150, seed=2)
cfg = FixedPointConfig()
hp = Hyperparams(k=4, gamma=0.3, lam=0.05, theta=0.05, epochs=5, seed=1)

rating_end, social_end = tcp_pair()
server = SocialPartyServer(social_end, graph, cfg, policy=MaskPolicy.sparse(), source=MaskSource(9))
thread = threading.Thread(target=server.serve)
thread.start()

client = SecureProductClient(rating_end, cfg, source=MaskSource(8))
res = train("sesorec", (ratings.users, ratings.items, ratings.ratings), ratings.n_users,
            ratings.n_items, hp, client=client)
client.stop()
thread.join()

for row in res.history:
    print(f"epoch {row['epoch']}: loss={row['loss']:.3f} bytes={row['bytes']}")
print("total bytes on the wire:", res.bytes_communicated)
print("rating party sent", rating_end.stats.bytes_sent, "bytes; social party sent",
      social_end.stats.bytes_sent)
