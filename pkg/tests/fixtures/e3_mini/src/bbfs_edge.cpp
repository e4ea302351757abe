// Bidirectional BFS between two labelled nodes, alternating sides each round.
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <queue>
#include <set>
#include <string>
#include <vector>

using Graph = std::map<long, std::vector<long>>;

static Graph load_edges(const char* path) {
    Graph g;
    std::ifstream in(path);
    long a, b;
    while (in >> a >> b) {
        g[a].push_back(b);
        g[b].push_back(a);
    }
    return g;
}

static std::map<long, std::string> load_labels(const char* path) {
    std::map<long, std::string> labels;
    std::ifstream in(path);
    long id;
    std::string name;
    while (in >> id >> name) labels[id] = name;
    return labels;
}

static std::vector<long> walk(const std::map<long, long>& parent, long from) {
    std::vector<long> out;
    for (long v = from; v != -1; v = parent.at(v)) out.push_back(v);
    return out;
}

int main(int argc, char** argv) {
    if (argc < 5) {
        std::cerr << "usage: out edges labels source target [params...]" << std::endl;
        return 2;
    }
    Graph g = load_edges(argv[1]);
    std::map<long, std::string> labels = load_labels(argv[2]);
    long s = std::atol(argv[3]), t = std::atol(argv[4]);
    std::cout << "variant edge" << std::endl;
    std::cout << "nodes " << g.size() << std::endl;
    for (int i = 5; i < argc; ++i) std::cout << "param " << (i - 4) << " " << argv[i] << std::endl;

    std::map<long, long> ps{{s, -1}}, pt{{t, -1}};
    std::vector<long> fs{s}, ft{t};
    long meet = s == t ? s : -1;
    int expanded = 0, round = 0;
    while (meet == -1 && !fs.empty() && !ft.empty()) {
        bool forward = (round++ % 2) == 0;
        auto& frontier = forward ? fs : ft;
        auto& mine = forward ? ps : pt;
        auto& other = forward ? pt : ps;
        std::vector<long> next;
        for (long u : frontier) {
            ++expanded;
            for (long v : g[u]) {
                if (mine.count(v)) continue;
                mine[v] = u;
                if (other.count(v)) { meet = v; break; }
                next.push_back(v);
            }
            if (meet != -1) break;
        }
        frontier.swap(next);
    }
    std::cout << "expanded " << expanded << std::endl;
    if (meet == -1) {
        std::cout << "no path" << std::endl;
        return 1;
    }
    std::vector<long> left = walk(ps, meet), right = walk(pt, meet);
    std::vector<long> path(left.rbegin(), left.rend());
    path.insert(path.end(), right.begin() + 1, right.end());
    std::cout << "length " << path.size() - 1 << std::endl;
    for (long v : path) {
        auto it = labels.find(v);
        std::cout << v << " " << (it == labels.end() ? "?" : it->second) << std::endl;
    }
    return 0;
}
