#include <gtest/gtest.h>

#include <sstream>

#include "caplab/experiment.hpp"

using namespace caplab;

namespace {

ExperimentSpec tiny_spec() {
  ExperimentSpec s = ExperimentSpec::defaults();
  s.data.n_scenes = 12;
  s.val_scenes = 4;
  s.test_scenes = 5;
  s.data.grid_h = 3;
  s.data.grid_w = 3;
  s.data.source = FeatureSource{4, 0.2, 7};
  s.rich_channels = 8;
  s.rich_noise = 0.1;
  s.embed_dim = 4;
  s.decoder_units = 6;
  s.attn_dim = 4;
  s.encoder_units = 3;
  s.training.max_epochs = 2;
  s.beam.beam_width = 2;
  s.beam.max_len = 8;
  return s;
}

}  // namespace

TEST(Spec, TextRoundTrip) {
  ExperimentSpec s = tiny_spec();
  s.arch = Architecture::Clarity;
  s.score_form = ScoreForm::Multiplicative;
  s.training.learning_rate = 0.0123;
  s.seeds = {4, 9};
  s.output_dir = "out/dir";
  const ExperimentSpec back = parse_spec(spec_text(s));
  EXPECT_EQ(spec_text(back), spec_text(s));
  EXPECT_EQ(back.arch, Architecture::Clarity);
  EXPECT_EQ(back.training.learning_rate, 0.0123);
  EXPECT_EQ(back.seeds, (std::vector<std::uint64_t>{4, 9}));
}

TEST(Spec, SectionsCommentsAndOverrides) {
  const ExperimentSpec s = parse_spec(
      "# comment\n[data]\nscenes = 40 ; trailing\n\n[model]\narch = genesis\n[train]\nlearning_rate=1e-3\n");
  EXPECT_EQ(s.data.n_scenes, 40u);
  EXPECT_EQ(s.arch, Architecture::Genesis);
  EXPECT_EQ(s.training.learning_rate, 1e-3);
  EXPECT_EQ(s.data.grid_h, 6u);
}

TEST(Spec, ErrorsNameTheLineAndKey) {
  try {
    parse_spec("[data]\nscenes = 4\nbogus = 1\n");
    FAIL();
  } catch (const SpecError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("data.bogus"), std::string::npos) << msg;
  }
  EXPECT_THROW(parse_spec("scenes = 4\n"), SpecError);
  EXPECT_THROW(parse_spec("[data]\nscenes = four\n"), SpecError);
  EXPECT_THROW(parse_spec("[data]\nscenes = -4\n"), SpecError);
  EXPECT_THROW(parse_spec("[model]\narch = nexus\n"), SpecError);
  EXPECT_THROW(parse_spec("[data\n"), SpecError);
  ExperimentSpec bad = tiny_spec();
  bad.training.plateau_factor = 2.0;
  EXPECT_THROW(bad.validate(), SpecError);
}

TEST(Ablation, SplitsShareScenesAcrossSources) {
  const ExperimentSpec s = tiny_spec();
  const AblationSplits base = ablation_splits(s, Architecture::Contexta, 1);
  const AblationSplits rich = ablation_splits(s, Architecture::Focalis, 1);
  ASSERT_EQ(base.train.scenes.size(), 12u);
  EXPECT_EQ(base.val.scenes.size(), 4u);
  EXPECT_EQ(base.test.scenes.size(), 5u);
  for (std::size_t i = 0; i < 12; ++i) {
    EXPECT_EQ(base.train.scenes[i].objects, rich.train.scenes[i].objects);
    EXPECT_EQ(base.train.examples[i].references, rich.train.examples[i].references);
  }
  EXPECT_EQ(base.train.examples[0].features.channels, 4u);
  EXPECT_EQ(rich.train.examples[0].features.channels, 8u);
  // Splits come from different generator seeds.
  bool differ = false;
  for (std::size_t i = 0; i < 4; ++i) differ = differ || !(base.train.scenes[i].objects == base.val.scenes[i].objects);
  EXPECT_TRUE(differ);
}

TEST(Ablation, ReportHasOneRowPerRunAndEmbedsSpec) {
  ExperimentSpec s = tiny_spec();
  std::vector<std::string> lines;
  AblationHooks hooks;
  hooks.log = [&](const std::string& l) { lines.push_back(l); };
  const AblationReport r = run_ablation(s, all_architectures(), hooks);
  ASSERT_EQ(r.runs.size(), 4u * 3u);
  EXPECT_FALSE(lines.empty());
  const std::string csv = ablation_csv(r);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 12);
  const std::string md = ablation_markdown(s, r);
  EXPECT_NE(md.find(spec_text(s)), std::string::npos);
  EXPECT_NE(md.find("| focalis | 2 |"), std::string::npos);
  // Same spec, same report.
  EXPECT_EQ(ablation_csv(run_ablation(s, all_architectures())), csv);
}

TEST(Ablation, SummaryFlags) {
  AblationReport r;
  auto add = [&](Architecture a, std::uint64_t seed, double b4) {
    AblationRun run;
    run.arch = a;
    run.seed = seed;
    run.bleu[3] = b4;
    r.runs.push_back(run);
  };
  add(Architecture::Focalis, 0, 0.9);
  add(Architecture::Clarity, 0, 0.4);
  add(Architecture::Focalis, 1, 0.3);
  add(Architecture::Clarity, 1, 0.4);
  summarize(r);
  EXPECT_FALSE(r.focalis_beats_clarity);
  EXPECT_FALSE(r.full_ordering);
  r.runs[2].bleu[3] = 0.95;
  add(Architecture::Contexta, 0, 0.5);
  add(Architecture::Genesis, 0, 0.45);
  summarize(r);
  EXPECT_TRUE(r.focalis_beats_clarity);
  EXPECT_TRUE(r.full_ordering);
}
