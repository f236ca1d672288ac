#include <doctest.h>

#include <cstring>

#include "attnprof/errors.hpp"
#include "attnprof/modelzoo/model.hpp"
#include "attnprof/modelzoo/presets.hpp"
#include "attnprof/workloads/workloads.hpp"

using namespace attnprof;

TEST_CASE("grid cardinalities and endpoints") {
  const auto text = text_grid();
  const auto speech = speech_grid();
  const auto vision = vision_grid();
  CHECK(text.points.size() == 56);
  CHECK(speech.points.size() == 99);
  CHECK(vision.points.size() == 32);

  for (std::size_t i = 0; i < text.tokens.size(); ++i) {
    CHECK(text.tokens[i] == 62 + 60 * static_cast<std::int64_t>(i));
    CHECK(text.points[i] == static_cast<double>(text.tokens[i]));
  }
  for (std::size_t i = 0; i < speech.tokens.size(); ++i) {
    CHECK(speech.points[i] == 1.0 + 0.5 * static_cast<double>(i));
    CHECK(speech.tokens[i] == 50 + 25 * static_cast<std::int64_t>(i));
  }
  for (std::size_t i = 0; i < vision.points.size(); ++i) {
    CHECK(vision.points[i] == 32.0 * static_cast<double>(i + 1));
  }
  CHECK(text.tokens.back() == 3362);
  CHECK(speech.tokens.back() == 2500);
  CHECK(vision.points.back() == 1024.0);
  CHECK(vision.tokens.back() == 4096);
}

TEST_CASE("text inputs have 6 tokens per repeat plus two specials") {
  std::vector<std::string> warnings;
  CHECK(make_text_input(10, 30000, &warnings).ids.size() == 62);
  CHECK(make_text_input(560, 30000, &warnings).ids.size() == 3362);
  CHECK(warnings.empty());

  const auto specials = make_text_input(0, 30000, &warnings);
  REQUIRE(specials.ids.size() == 2);
  CHECK(specials.ids[0] == 0);
  CHECK(specials.ids[1] == 2);
  CHECK(warnings.size() == 1);

  make_text_input(15, 30000, &warnings);
  CHECK(warnings.size() == 2);

  const auto ids = make_text_input(2, 30000, &warnings).ids;
  const std::vector<std::int32_t> expected = {0, 713, 16, 10, 3645, 4, 1437, 713, 16, 10, 3645, 4, 1437, 2};
  CHECK(ids == expected);
  for (auto id : make_text_tokens(100, 500).ids) CHECK(id < 500);
}

TEST_CASE("waveforms and images are seeded") {
  const auto a = make_waveform(1.0, 7);
  const auto b = make_waveform(1.0, 7);
  const auto c = make_waveform(1.0, 8);
  REQUIRE(a.samples.numel() == 16000);
  CHECK(std::memcmp(a.samples.data(), b.samples.data(), 16000 * sizeof(float)) == 0);
  CHECK(std::memcmp(a.samples.data(), c.samples.data(), 16000 * sizeof(float)) != 0);
  for (float v : a.samples.values()) {
    CHECK(v >= -1.f);
    CHECK(v < 1.f);
  }
  CHECK(make_waveform(1.5, 0).samples.numel() == 24000);
  CHECK(nominal_speech_tokens(1.0) == 50);
  CHECK(nominal_speech_tokens(1.5) == 75);
  CHECK(nominal_speech_tokens(50.0) == 2500);

  const auto i1 = make_image(32, 3);
  const auto i2 = make_image(32, 3);
  CHECK(i1.pixels.numel() == 32 * 32 * 3);
  CHECK(std::memcmp(i1.pixels.data(), i2.pixels.data(), 32 * 32 * 3 * sizeof(float)) == 0);
}

TEST_CASE("padding rules") {
  CHECK(pad_input(100, 512) == 512);
  CHECK(pad_input(100, 224) == 224);
  CHECK(pad_input(512, 512) == 512);
  CHECK(pad_input(513, 512) == 1024);

  const auto longformer = preset_config("text-sliding", Preset::Paper);
  CHECK(tokens_for(longformer, 100) == 512);
  const auto swin = preset_config("vision-swin", Preset::Paper);
  const auto side = 224 / swin.patch_size;
  CHECK(tokens_for(swin, 100) == side * side);
  CHECK(tokens_for(swin, 224) == side * side);

  const auto vit = preset_config("vision-full", Preset::Paper);
  CHECK(tokens_for(vit, 1024) == 4096 + 1);  // patches plus CLS
  const auto hubert = preset_config("speech-full", Preset::Paper);
  CHECK(model_units(hubert, 1.0) == 16000);
  CHECK(tokens_for(hubert, 1.0) == 49);
}

TEST_CASE("typical lengths") {
  CHECK(typical_lengths().size() == 13);
  CHECK(typical_length("SST") == 23);
  CHECK(typical_length("TriviaQA") == 6589);
  CHECK(typical_length("Librispeech") == 615);
  CHECK(typical_length("Spotify") == 101400);
  CHECK_THROWS_AS(typical_length("Librispeach"), LookupError);
  try {
    typical_length("Librispeach");
  } catch (const LookupError& e) {
    CHECK(std::string(e.what()).find("Librispeech") != std::string::npos);
  }
}

TEST_CASE("grid specs") {
  CHECK(parse_grid_spec("62:3362:60").size() == 56);
  CHECK(parse_grid_spec("1:50:0.5").size() == 99);
  CHECK(parse_grid_spec("100:300:100") == std::vector<double>{100, 200, 300});
  CHECK(parse_grid_spec("128") == std::vector<double>{128});
  CHECK_THROWS_AS(parse_grid_spec("1:2"), ConfigError);
  CHECK_THROWS_AS(parse_grid_spec("1:2:0"), ConfigError);
  CHECK_THROWS_AS(parse_grid_spec("5:2:1"), ConfigError);
  CHECK_THROWS_AS(parse_grid_spec("a:2:1"), ConfigError);
}

TEST_CASE("make_input follows the model modality") {
  const auto text = preset_config("text-full", Preset::Desk);
  CHECK(std::get<TokenInput>(make_input(text, 62, 0)).ids.size() == 62);
  const auto speech = preset_config("speech-full", Preset::Desk);
  CHECK(std::get<WaveformInput>(make_input(speech, 2.0, 0)).samples.numel() == 32000);
  const auto vision = preset_config("vision-full", Preset::Desk);
  CHECK(std::get<ImageInput>(make_input(vision, 64, 0)).pixels.numel() == 64 * 64 * 3);
}
