// Writes the synthetic corpus, lexicon, tagged corpus and synonym pairs used
// by the acceptance suite into a directory.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "cuimlm/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate the synthetic clinical corpus", "cuimlm-synth"};
  std::string dir;
  std::size_t sentences = 2000;
  std::uint64_t seed = 0;
  app.add_option("--out-dir", dir, "Directory to write into")->required();
  app.add_option("--sentences", sentences);
  app.add_option("--seed", seed);
  CLI11_PARSE(app, argc, argv);

  const cuimlm::SyntheticCorpus sc = cuimlm::make_synthetic_corpus(sentences, seed);
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream f(std::filesystem::path(dir) / name);
    if (!f) {
      std::cerr << "cannot write " << name << '\n';
      std::exit(2);
    }
    return f;
  };
  open("lexicon.tsv") << sc.lexicon_tsv;
  {
    auto f = open("corpus.txt");
    for (const auto& s : sc.sentences) f << s << '\n';
  }
  {
    auto f = open("tagged.txt");
    for (const auto& s : sc.tagged_lines) f << s << '\n';
  }
  {
    auto f = open("synonyms.txt");
    for (const auto& [a, b] : sc.synonym_pairs) f << a << ' ' << b << '\n';
  }
  std::cout << "wrote " << sc.sentences.size() << " sentences to " << dir << '\n';
  return 0;
}
