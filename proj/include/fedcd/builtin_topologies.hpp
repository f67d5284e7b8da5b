#pragma once

// Bundled wide-area topologies with the silo counts of the three reference
// networks (11 / 22 / 79). These are synthetic stand-ins with plausible
// degree and link characteristics, identical to the files shipped under
// data/topologies/.

#include <sstream>
#include <stdexcept>
#include <string>

#include "fedcd/topology.hpp"

namespace fedcd::topology {

inline constexpr const char* k_gaia11 = R"TOPO(# silos 11
# gaia11: synthetic wide-area topology (11 silos, 17 links)
0 1 35.4 100
0 4 88.9 1000
0 7 19.4 500
1 5 14.1 300
1 6 100.4 1000
2 3 106.8 300
2 6 71.4 100
2 7 10.3 200
3 6 93.9 100
3 7 103.4 100
3 9 48.7 500
4 5 78.1 300
5 7 23.7 300
5 9 29.1 300
7 8 85.7 100
7 9 75.1 200
8 10 66.4 200
)TOPO";
inline constexpr const char* k_nws22 = R"TOPO(# silos 22
# nws22: synthetic wide-area topology (22 silos, 35 links)
0 10 59.4 500
1 3 74.2 100
1 13 46.2 100
1 18 105.5 200
2 10 71.0 300
2 13 17.5 1000
2 15 53.8 1000
2 19 9.4 100
2 20 17.2 100
3 9 19.5 100
3 10 118.8 300
3 19 18.6 1000
4 5 62.3 500
5 17 102.0 500
5 21 15.0 100
6 7 15.7 200
6 13 102.5 500
6 14 27.3 1000
8 11 51.4 1000
8 16 72.4 300
9 13 50.8 100
10 16 26.4 200
10 20 95.1 200
10 21 86.2 100
11 15 82.0 300
11 21 30.5 200
12 17 94.3 500
13 18 99.6 500
14 19 30.9 500
14 21 62.7 100
16 19 8.1 1000
17 19 104.0 1000
17 21 107.1 1000
18 20 104.0 100
20 21 71.6 300
)TOPO";
inline constexpr const char* k_exodus79 = R"TOPO(# silos 79
# exodus79: synthetic wide-area topology (79 silos, 123 links)
0 9 72.1 300
0 18 101.2 500
0 21 107.7 200
0 26 44.7 300
0 53 30.9 500
0 61 40.2 300
0 74 67.0 500
1 30 16.2 200
1 68 97.3 300
2 9 7.2 200
2 21 81.4 300
2 35 80.7 300
2 36 56.0 100
3 8 70.9 100
4 26 38.6 200
4 45 92.2 300
5 14 100.9 100
5 16 113.4 200
5 50 11.9 500
5 76 10.6 100
6 26 40.6 100
6 64 23.6 300
7 60 12.1 200
8 20 66.0 300
8 29 13.9 100
8 57 11.3 1000
8 78 93.3 1000
9 22 44.0 500
9 33 17.9 1000
9 63 43.2 200
10 36 104.5 1000
10 51 61.0 100
11 16 6.2 100
11 45 100.2 1000
12 15 78.4 100
13 25 107.3 1000
13 46 94.2 1000
13 51 71.5 500
14 24 69.2 100
14 35 49.7 1000
14 40 64.9 200
14 71 118.1 1000
15 34 48.6 1000
15 77 94.0 200
16 21 28.9 300
16 27 106.9 300
16 32 31.7 1000
16 35 44.5 1000
16 36 63.8 1000
16 41 8.1 200
16 51 53.5 500
16 59 51.0 100
16 63 50.5 200
17 50 27.1 1000
17 57 41.7 300
18 52 53.4 300
18 68 105.9 500
19 29 42.5 1000
19 38 66.8 1000
19 64 47.2 100
20 22 60.5 500
20 28 87.1 100
20 30 115.7 300
20 54 32.8 300
22 61 70.3 1000
22 71 109.3 500
23 28 6.4 100
23 43 118.6 500
24 33 40.6 1000
24 69 114.8 200
26 44 42.5 300
26 62 5.9 1000
27 77 14.9 500
28 57 69.3 1000
29 51 32.6 200
29 76 86.2 200
30 32 60.8 300
30 68 70.4 200
31 35 118.8 500
31 47 39.6 1000
31 61 75.9 300
33 51 64.8 300
34 48 36.4 100
34 51 94.4 1000
34 67 45.1 100
35 66 91.6 1000
35 74 78.0 500
36 37 45.3 200
36 38 6.3 200
36 40 34.8 500
36 57 9.0 300
36 58 67.8 100
36 65 41.0 300
36 68 6.3 100
37 48 79.0 500
38 69 77.2 300
38 75 114.4 300
39 42 8.5 200
39 43 45.4 500
39 51 37.8 1000
40 49 14.9 300
40 75 6.8 200
41 63 18.3 500
41 69 48.6 1000
42 60 83.2 200
42 71 41.5 300
43 51 49.7 100
46 67 22.5 1000
47 63 60.4 1000
48 51 49.8 1000
48 63 96.5 1000
50 55 103.8 300
50 68 6.9 1000
54 76 115.4 100
56 61 44.2 200
56 73 76.4 100
58 61 82.4 300
59 70 18.9 100
60 62 21.9 100
60 68 10.5 100
60 73 10.2 200
62 72 19.9 100
64 73 48.5 100
)TOPO";

inline bool is_builtin_topology(const std::string& name) {
  return name == "gaia11" || name == "nws22" || name == "exodus79";
}

inline TopologyGraph builtin_topology(const std::string& name) {
  const char* text = nullptr;
  if (name == "gaia11") text = k_gaia11;
  else if (name == "nws22") text = k_nws22;
  else if (name == "exodus79") text = k_exodus79;
  if (text == nullptr) throw std::invalid_argument("topology: unknown builtin '" + name + "'");
  std::istringstream in(text);
  return parse_topology(in, name);
}

}  // namespace fedcd::topology
