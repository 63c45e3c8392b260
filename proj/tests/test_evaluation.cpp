// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "graft/evaluation.hpp"
#include "graft/metrics.hpp"
#include "graft/model.hpp"
#include "graft/transformer.hpp"

namespace {

namespace fs = std::filesystem;

graft::prediction make_pred(const std::string& label, bool refused = false) {
  graft::prediction p;
  p.label = label;
  p.refused = refused;
  return p;
}

// scratch dir fresh per use
fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_jsonl(const fs::path& path, const std::vector<std::string>& lines) {
  std::string body;
  for (const std::string& line : lines) body += line + "\n";
  graft::write_file(path.string(), body);
}

}  // namespace

TEST_CASE("accuracy counts exact matches and scores refusals wrong") {
  const std::vector<std::string> golds = {"a", "b", "a", "c"};
  std::vector<graft::prediction> preds = {make_pred("a"), make_pred("b"), make_pred("a"),
                                          make_pred("c")};
  CHECK(graft::accuracy(preds, golds) == 1.0);

  preds[1] = make_pred("a");                // wrong label
  preds[3] = make_pred("", true);           // refusal
  CHECK(graft::accuracy(preds, golds) == 0.5);

  // a refusal whose label field happens to equal the gold still scores wrong
  preds[3] = make_pred("c", true);
  CHECK(graft::accuracy(preds, golds) == 0.5);

  CHECK_THROWS_WITH(graft::accuracy(preds, {"a", "b"}),
                    Catch::Matchers::ContainsSubstring("4 predictions vs 2 golds"));
  CHECK_THROWS_WITH(graft::accuracy({}, {}), Catch::Matchers::ContainsSubstring("no predictions"));
}

TEST_CASE("accuracy equals a naive per-item loop on random inputs") {
  graft::rng gen(515);
  for (int round = 0; round < 50; ++round) {
    const std::size_t n = 1 + gen.next_below(40);
    std::vector<graft::prediction> preds;
    std::vector<std::string> golds;
    std::size_t expected = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::string gold(1, static_cast<char>('a' + gen.next_below(3)));
      const std::string label(1, static_cast<char>('a' + gen.next_below(3)));
      const bool refused = gen.next_below(4) == 0;
      golds.push_back(gold);
      preds.push_back(make_pred(label, refused));
      if (!refused && label == gold) ++expected;
    }
    REQUIRE(graft::accuracy(preds, golds) ==
            static_cast<double>(expected) / static_cast<double>(n));
  }
}

TEST_CASE("match normalization folds case, punctuation, and composition") {
  CHECK(graft::normalize_for_match("The ANSWER: Positive!!") == "the answer positive");
  CHECK(graft::normalize_for_match("  spaced\tout \n words ") == "spaced out words");
  CHECK(graft::normalize_for_match("؟سلام، دنیا") == "سلام دنیا");
  // decomposed e + combining acute composes to the same form as precomposed
  CHECK(graft::normalize_for_match("caf\x65\xcc\x81") == graft::normalize_for_match("caf\xc3\xa9"));
  CHECK(graft::normalize_for_match("!!!").empty());
}

TEST_CASE("bleu tokenization detaches punctuation in both scripts") {
  CHECK(graft::bleu_tokenize("Hello, world!") ==
        std::vector<std::string>{"Hello", ",", "world", "!"});
  CHECK(graft::bleu_tokenize("گفت: «سلام»") ==
        std::vector<std::string>{"گفت", ":", "«", "سلام", "»"});
  CHECK(graft::bleu_tokenize("   ").empty());
}

TEST_CASE("bleu is one on identity and zero on empty hypotheses") {
  const std::vector<std::string> refs = {"the cat sat on the mat", "دنیا سلام",
                                         "a much longer reference sentence appears here"};
  CHECK(graft::bleu(refs, refs) == Catch::Approx(1.0).margin(1e-12));
  CHECK(graft::bleu({""}, {"any reference"}) == 0.0);
  CHECK_THROWS_WITH(graft::bleu({"hyp"}, {""}),
                    Catch::Matchers::ContainsSubstring("reference sentence 0 is empty"));
  CHECK_THROWS_WITH(graft::bleu({"a"}, {"a", "b"}),
                    Catch::Matchers::ContainsSubstring("1 hypotheses vs 2 references"));
  CHECK_THROWS_WITH(graft::bleu({}, {}), Catch::Matchers::ContainsSubstring("no sentence pairs"));
}

TEST_CASE("bleu matches hand-computed n-gram tables") {
  constexpr double eps = 1e-9;

  SECTION("short hypothesis, all present orders perfect") {
    // hyp "the cat sat" vs ref "the cat sat down":
    // p1 = 3/3, p2 = 2/2, p3 = 1/1, no 4-grams in hyp -> p4 = eps
    // brevity = exp(1 - 4/3)
    const double expected =
        std::exp((std::log(1.0) * 3 + std::log(eps)) / 4.0) * std::exp(1.0 - 4.0 / 3.0);
    CHECK(graft::bleu({"the cat sat"}, {"the cat sat down"}) ==
          Catch::Approx(expected).margin(1e-9));
  }

  SECTION("clipping caps repeated unigrams") {
    // hyp "the the the the" vs ref "the cat":
    // p1 = clip(4 -> 1)/4, p2 = eps/3, p3 = eps/2, p4 = eps/1, brevity = 1
    const double expected = std::exp(
        (std::log(1.0 / 4.0) + std::log(eps / 3.0) + std::log(eps / 2.0) + std::log(eps)) / 4.0);
    CHECK(graft::bleu({"the the the the"}, {"the cat"}) == Catch::Approx(expected).margin(1e-9));
  }

  SECTION("corpus pooling sums counts before dividing") {
    // pair 1: hyp "a b c d" vs ref "a b c d"   -> 4/4, 3/3, 2/2, 1/1
    // pair 2: hyp "a b x y" vs ref "a b q r"   -> 2/4, 1/3, 0/2, 0/1
    // pooled: p1 = 6/8, p2 = 4/6, p3 = 2/4, p4 = 1/2, lengths equal -> brevity 1
    const double expected = std::exp(
        (std::log(6.0 / 8.0) + std::log(4.0 / 6.0) + std::log(2.0 / 4.0) + std::log(1.0 / 2.0)) /
        4.0);
    CHECK(graft::bleu({"a b c d", "a b x y"}, {"a b c d", "a b q r"}) ==
          Catch::Approx(expected).margin(1e-12));
  }

  SECTION("punctuation detachment aligns spaced and attached forms") {
    CHECK(graft::bleu({"Hello, world!"}, {"Hello , world !"}) ==
          Catch::Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("padding a perfect hypothesis with junk never raises bleu") {
  const std::string ref = "the quick brown fox jumps over the lazy dog";
  const double exact = graft::bleu({ref}, {ref});
  std::string padded = ref;
  for (int i = 0; i < 6; ++i) {
    padded += " junk" + std::to_string(i);
    const double score = graft::bleu({padded}, {ref});
    REQUIRE(score < exact);
    REQUIRE(score >= 0.0);
  }
}

TEST_CASE("bleu stays within the unit interval on random token soup") {
  graft::rng gen(8181);
  for (int round = 0; round < 30; ++round) {
    auto sentence = [&](std::size_t max_len) {
      std::string s;
      const std::size_t len = 1 + gen.next_below(max_len);
      for (std::size_t i = 0; i < len; ++i) {
        if (i) s += ' ';
        s += "tok" + std::to_string(gen.next_below(6));
      }
      return s;
    };
    const std::vector<std::string> hyp = {sentence(10), sentence(10)};
    const std::vector<std::string> ref = {sentence(10), sentence(10)};
    const double score = graft::bleu(hyp, ref);
    REQUIRE(score >= 0.0);
    REQUIRE(score <= 1.0);
  }
}

TEST_CASE("classification parses the earliest matching label") {
  const auto echo = [](const std::string& text) {
    return [text](const std::string&) { return text; };
  };
  const std::vector<std::string> labels = {"positive", "negative"};

  graft::prediction p =
      graft::classify_by_generation(echo("The answer is: Positive."), "q", labels);
  CHECK_FALSE(p.refused);
  CHECK(p.label == "positive");

  // the earlier occurrence wins even when the other label leads the list
  p = graft::classify_by_generation(echo("negative... or maybe positive"), "q", labels);
  CHECK(p.label == "negative");

  // same position: label order breaks the tie ("no" starts where "november" does)
  p = graft::classify_by_generation(echo("november rain"), "q", {"no", "november"});
  CHECK(p.label == "no");

  // repeated input without any label is a refusal
  p = graft::classify_by_generation(echo("Is this review positive or bad? Is this review"),
                                    "q", {"yes", "never"});
  CHECK(p.refused);
  CHECK(p.label.empty());

  // decode failure refuses with a diagnostic instead of throwing
  const graft::text_generator broken = [](const std::string&) -> std::string {
    throw graft::error("context overflow");
  };
  p = graft::classify_by_generation(broken, "q", labels);
  CHECK(p.refused);
  CHECK(p.raw.find("decode failed") != std::string::npos);
  CHECK(p.raw.find("context overflow") != std::string::npos);

  CHECK_THROWS_WITH(graft::classify_by_generation(echo("x"), "q", {}),
                    Catch::Matchers::ContainsSubstring("empty label set"));
}

TEST_CASE("random baselines reproduce the published column analytically") {
  graft::task_spec mc;
  mc.name = "multiple_choice";
  mc.labels = {"alef", "beh", "jim", "dal"};
  CHECK(graft::random_baseline(mc) == 0.25);

  graft::task_spec sentiment;
  sentiment.name = "sentiment";
  sentiment.labels = {"positive", "negative"};
  CHECK(graft::random_baseline(sentiment) == 0.50);

  graft::task_spec entailment;
  entailment.name = "entailment";
  entailment.labels = {"entailment", "contradiction", "neutral"};
  CHECK(graft::random_baseline(entailment) == Catch::Approx(1.0 / 3.0));

  graft::task_spec gen;
  gen.name = "summarization";
  gen.kind = graft::task_kind::generation;
  CHECK_THROWS_WITH(graft::random_baseline(gen),
                    Catch::Matchers::ContainsSubstring("summarization"));

  graft::task_spec degenerate;
  degenerate.name = "oops";
  degenerate.labels = {"only"};
  CHECK_THROWS_AS(graft::random_baseline(degenerate), graft::config_error);
}

TEST_CASE("task and dataset readers validate their files") {
  const fs::path dir = scratch_dir("graft_eval_io");

  write_jsonl(dir / "sent.jsonl",
              {R"({"instruction":"Classify the review.","input":"great","gold":"positive"})",
               R"({"instruction":"Classify the review.","input":"awful","gold":"negative",)"
               R"("labels":["positive","negative","mixed"]})"});
  const auto examples = graft::read_eval_examples((dir / "sent.jsonl").string());
  REQUIRE(examples.size() == 2);
  CHECK(examples[0].labels.empty());
  CHECK(examples[1].labels.size() == 3);
  CHECK(examples[1].gold == "negative");

  write_jsonl(dir / "bad.jsonl", {R"({"instruction":"x","input":"y"})"});
  CHECK_THROWS_WITH(graft::read_eval_examples((dir / "bad.jsonl").string()),
                    Catch::Matchers::ContainsSubstring(":1"));

  graft::write_file((dir / "tasks.json").string(), R"({"tasks": [
    {"name": "sentiment", "kind": "classification", "labels": ["positive", "negative"],
     "language": "new", "dataset": "sent.jsonl"},
    {"name": "translation", "kind": "generation", "dataset": "sent.jsonl",
     "seen_in_training": false}
  ]})");
  const auto tasks = graft::read_task_specs((dir / "tasks.json").string());
  REQUIRE(tasks.size() == 2);
  CHECK(tasks[0].language == "new");
  CHECK(tasks[0].dataset_path == (dir / "sent.jsonl").string());  // resolved relative
  CHECK(tasks[1].kind == graft::task_kind::generation);
  CHECK_FALSE(tasks[1].seen_in_training);

  graft::write_file((dir / "empty.json").string(), R"({"tasks": []})");
  CHECK_THROWS_WITH(graft::read_task_specs((dir / "empty.json").string()),
                    Catch::Matchers::ContainsSubstring("non-empty tasks array"));

  graft::write_file((dir / "badkind.json").string(),
                    R"({"tasks": [{"name": "x", "kind": "ranking", "dataset": "d"}]})");
  CHECK_THROWS_WITH(graft::read_task_specs((dir / "badkind.json").string()),
                    Catch::Matchers::ContainsSubstring("unknown task kind: ranking"));
  fs::remove_all(dir);
}

TEST_CASE("run_eval reproduces a hand-scored fixture suite") {
  const fs::path dir = scratch_dir("graft_eval_suite");

  write_jsonl(dir / "sentiment.jsonl",
              {R"({"instruction":"Classify the review.","input":"this was GREAT","gold":"positive"})",
               R"({"instruction":"Classify the review.","input":"total disaster","gold":"negative"})",
               R"({"instruction":"Classify the review.","input":"fine i guess","gold":"positive"})",
               R"({"instruction":"Classify the review.","input":"meh","gold":"negative"})"});
  write_jsonl(dir / "mc.jsonl",
              {R"({"instruction":"Pick the best option.","input":"q1",)"
               R"("labels":["alef","beh","jim","dal"],"gold":"jim"})",
               R"({"instruction":"Pick the best option.","input":"q2",)"
               R"("labels":["east","west"],"gold":"west"})"});
  write_jsonl(dir / "translate.jsonl",
              {R"({"instruction":"Translate to English.","input":"سلام دنیا","gold":"hello world"})",
               R"({"instruction":"Translate to English.","input":"کتاب خوب","gold":"a good book"})"});

  // scripted model: keyed on the rendered prompt's input line
  const graft::text_generator scripted = [](const std::string& prompt) -> std::string {
    if (prompt.find("this was GREAT") != std::string::npos) return "Sentiment: positive.";
    if (prompt.find("total disaster") != std::string::npos) return "clearly negative";
    if (prompt.find("fine i guess") != std::string::npos) return "negative";  // wrong
    if (prompt.find("meh") != std::string::npos) return "cannot decide";      // refusal
    if (prompt.find("q1") != std::string::npos) return "the answer is jim";
    if (prompt.find("q2") != std::string::npos) return "West!";
    if (prompt.find("سلام دنیا") != std::string::npos) return "hello world";
    if (prompt.find("کتاب خوب") != std::string::npos) return "a good story";
    return "";
  };

  std::vector<graft::task_spec> tasks(3);
  tasks[0].name = "sentiment";
  tasks[0].labels = {"positive", "negative"};
  tasks[0].language = "new";
  tasks[0].seen_in_training = false;
  tasks[0].dataset_path = (dir / "sentiment.jsonl").string();
  tasks[1].name = "multiple_choice";
  tasks[1].labels = {"unused", "fallback"};  // every example carries its own labels
  tasks[1].language = "new";
  tasks[1].dataset_path = (dir / "mc.jsonl").string();
  tasks[2].name = "translation";
  tasks[2].kind = graft::task_kind::generation;
  tasks[2].language = "new";
  tasks[2].dataset_path = (dir / "translate.jsonl").string();

  const graft::eval_report report = graft::run_eval(scripted, tasks, "ckpt-test", 7);

  REQUIRE(report.tasks.size() == 3);
  // sentiment: correct, correct, wrong, refused -> 2/4
  CHECK(report.tasks[0].score == 0.5);
  CHECK(report.tasks[0].refusals == 1);
  CHECK(report.tasks[0].examples == 4);
  // multiple choice: both right via per-example label sets
  CHECK(report.tasks[1].score == 1.0);
  CHECK(report.tasks[1].refusals == 0);
  // translation: same strings scored by the public bleu
  const double expected_bleu =
      graft::bleu({"hello world", "a good story"}, {"hello world", "a good book"});
  CHECK(report.tasks[2].score == expected_bleu);
  CHECK(report.avg_classification == Catch::Approx((0.5 + 1.0) / 2.0));
  CHECK(report.avg_generation == expected_bleu);
  CHECK(report.total_refusals == 1);
  CHECK(report.checkpoint_lineage == "ckpt-test");

  // rendering: unseen task starred, averages present, generation refusals dashed
  const std::string table = report.to_table();
  CHECK(table.find("*sentiment") != std::string::npos);
  CHECK(table.find("multiple_choice") != std::string::npos);
  CHECK(table.find("Avg.Classification") != std::string::npos);
  CHECK(table.find("0.75") != std::string::npos);
  CHECK(table.find("Avg.Generation") != std::string::npos);

  // byte-identical reports across reruns, no timestamps anywhere
  const graft::eval_report again = graft::run_eval(scripted, tasks, "ckpt-test", 7);
  CHECK(report.to_json().dump(2) == again.to_json().dump(2));
  CHECK(report.to_table() == again.to_table());

  // emitted files match the in-memory report
  graft::write_eval_report(report, (dir / "out").string());
  CHECK(graft::read_file((dir / "out" / "report.json").string()) ==
        report.to_json().dump(2) + "\n");
  CHECK(graft::read_file((dir / "out" / "report.txt").string()) == report.to_table());

  // error paths: missing dataset names the task; zero tasks rejected
  std::vector<graft::task_spec> missing = tasks;
  missing[1].dataset_path = (dir / "nope.jsonl").string();
  CHECK_THROWS_WITH(graft::run_eval(scripted, missing),
                    Catch::Matchers::ContainsSubstring("multiple_choice"));
  CHECK_THROWS_WITH(graft::run_eval(scripted, {}),
                    Catch::Matchers::ContainsSubstring("no tasks"));

  write_jsonl(dir / "empty.jsonl", {});
  std::vector<graft::task_spec> hollow = {tasks[2]};
  hollow[0].dataset_path = (dir / "empty.jsonl").string();
  CHECK_THROWS_WITH(graft::run_eval(scripted, hollow),
                    Catch::Matchers::ContainsSubstring("no examples"));
  fs::remove_all(dir);
}

TEST_CASE("a uniform-random predictor lands within three sigma of chance") {
  const fs::path dir = scratch_dir("graft_eval_random");
  struct case_spec {
    const char* name;
    std::vector<std::string> labels;
  };
  const std::vector<case_spec> cases = {
      {"multiple_choice", {"alef", "beh", "jim", "dal"}},
      {"sentiment", {"positive", "negative"}},
      {"entailment", {"entailment", "contradiction", "neutral"}},
  };
  graft::rng gen(24680);
  for (const case_spec& c : cases) {
    DYNAMIC_SECTION(c.name) {
      const std::size_t n = 1000;
      std::vector<std::string> lines;
      for (std::size_t i = 0; i < n; ++i) {
        // golds cycle through the label set so no answer dominates
        lines.push_back(std::string(R"({"instruction":"Answer.","input":"item )") +
                        std::to_string(i) + R"(","gold":")" + c.labels[i % c.labels.size()] +
                        R"("})");
      }
      const fs::path data = dir / (std::string(c.name) + ".jsonl");
      write_jsonl(data, lines);

      graft::task_spec task;
      task.name = c.name;
      task.labels = c.labels;
      task.dataset_path = data.string();

      const graft::text_generator random_predictor = [&](const std::string&) {
        return c.labels[gen.next_below(c.labels.size())];
      };
      const graft::eval_report report = graft::run_eval(random_predictor, {task});
      const double p = graft::random_baseline(task);
      const double sigma = std::sqrt(p * (1.0 - p) / static_cast<double>(n));
      INFO("accuracy " << report.tasks[0].score << " expected " << p << " sigma " << sigma);
      CHECK(std::abs(report.tasks[0].score - p) <= 3.0 * sigma);
      CHECK(report.tasks[0].refusals == 0);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("greedy decoding is deterministic and respects its budgets") {
  graft::model_config cfg;
  cfg.n_layers = 1;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_ffn = 12;
  cfg.vocab_size = 16;
  cfg.max_seq_len = 12;
  const graft::parameter_store store = graft::build_model(cfg, 99);

  const std::vector<std::uint32_t> prompt = {1, 7, 3};
  const auto a = graft::generate_greedy(store, nullptr, prompt, 4, 2);
  const auto b = graft::generate_greedy(store, nullptr, prompt, 4, 2);
  CHECK(a == b);
  CHECK(a.size() <= 4);
  CHECK_FALSE(a.empty());
  for (std::uint32_t id : a) REQUIRE(id < cfg.vocab_size);

  // context cap: prompt of 11 leaves exactly one slot
  std::vector<std::uint32_t> long_prompt(11, 3);
  CHECK(graft::generate_greedy(store, nullptr, long_prompt, 50, 2).size() == 1);

  // a full prompt cannot decode at all
  std::vector<std::uint32_t> full_prompt(12, 3);
  CHECK_THROWS_WITH(graft::generate_greedy(store, nullptr, full_prompt, 4, 2),
                    Catch::Matchers::ContainsSubstring("no room to decode"));
  CHECK_THROWS_WITH(graft::generate_greedy(store, nullptr, {}, 4, 2),
                    Catch::Matchers::ContainsSubstring("empty prompt"));

  // eos stops the walk: find the greedy first token, then make it the eos
  const auto first = graft::generate_greedy(store, nullptr, prompt, 1, 2);
  const auto stopped = graft::generate_greedy(store, nullptr, prompt, 6, first[0]);
  CHECK(stopped.size() == 1);
  CHECK(stopped[0] == first[0]);
}

TEST_CASE("scoring survives model output that is not valid UTF-8") {
  // byte-fallback decoding can emit partial multi-byte sequences; the metric
  // layer maps each undecodable byte to the replacement character
  const std::string junk = std::string("hi \xe2 there \xff") + static_cast<char>(0x80);
  CHECK(graft::sanitize_utf8(junk) ==
        "hi \xef\xbf\xbd there \xef\xbf\xbd\xef\xbf\xbd");
  CHECK(graft::sanitize_utf8("caf\xc3\xa9 ok") == "caf\xc3\xa9 ok");

  CHECK_NOTHROW(graft::normalize_for_match(junk));
  const double score = graft::bleu({junk}, {"hi there"});
  CHECK(score >= 0.0);
  CHECK(score <= 1.0);

  const graft::text_generator broken_bytes = [](const std::string&) {
    return std::string("\xff\xfeyes\xf0");
  };
  const graft::prediction p =
      graft::classify_by_generation(broken_bytes, "prompt", {"yes", "no"});
  CHECK_FALSE(p.refused);
  CHECK(p.label == "yes");
}
