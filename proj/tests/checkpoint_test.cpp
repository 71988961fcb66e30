#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "cuimlm/checkpoint.hpp"
#include "cuimlm/gradcheck.hpp"

using namespace cuimlm;
using Kind = CheckpointError::Kind;

namespace {

Checkpoint trained_checkpoint() {
  GradCheckFixture fx = make_gradcheck_fixture(2);
  TrainConfig tcfg;
  tcfg.loss_mode = LossMode::BceCui;
  tcfg.seed = 21;
  tcfg.total_steps = 3;
  tcfg.batch_size = 2;
  tcfg.learning_rate = 1e-2;
  Checkpoint ck = initial_checkpoint(fx.model, tcfg, fx.vocab, fx.lexicon);
  return train_from(std::move(ck), fx.sentences, fx.lexicon, fx.vocab);
}

Kind load_kind(const std::string& bytes) {
  try {
    checkpoint_from_bytes(bytes);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "checkpoint loaded unexpectedly";
  return Kind::Malformed;
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const Checkpoint ck = trained_checkpoint();
  const std::string bytes = checkpoint_bytes(ck);
  const Checkpoint loaded = checkpoint_from_bytes(bytes);
  EXPECT_EQ(loaded, ck);
  EXPECT_EQ(checkpoint_bytes(loaded), bytes);
}

TEST(Checkpoint, LayoutStartsWithMagicAndVersion) {
  const std::string bytes = checkpoint_bytes(trained_checkpoint());
  EXPECT_EQ(bytes.substr(0, 4), "UMLB");
  EXPECT_EQ(bytes.substr(4, 4), std::string("\x01\x00\x00\x00", 4));
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  const auto header = nlohmann::json::parse(bytes.substr(16, header_len));
  EXPECT_EQ(header.at("tensors")[0].at("name"), "token_table");
  EXPECT_EQ(header.at("rng").at("root_seed"), 21);
  const std::uint64_t payload = header.at("payload_bytes");
  EXPECT_EQ(bytes.size(), 16 + header_len + payload);
}

TEST(Checkpoint, LoadedParamsGiveIdenticalLogits) {
  const Checkpoint ck = trained_checkpoint();
  const Checkpoint loaded = checkpoint_from_bytes(checkpoint_bytes(ck));
  GradCheckFixture fx = make_gradcheck_fixture(2);
  EXPECT_EQ(forward(ck.params, ck.model, fx.sentences).logits, forward(loaded.params, loaded.model, fx.sentences).logits);
}

TEST(Checkpoint, BadMagic) {
  std::string bytes = checkpoint_bytes(trained_checkpoint());
  bytes[0] = 'X';
  EXPECT_EQ(load_kind(bytes), Kind::BadMagic);
  EXPECT_EQ(load_kind("UM"), Kind::BadMagic);
  EXPECT_EQ(load_kind(""), Kind::BadMagic);
}

TEST(Checkpoint, VersionMismatch) {
  std::string bytes = checkpoint_bytes(trained_checkpoint());
  bytes[4] = 2;
  EXPECT_EQ(load_kind(bytes), Kind::VersionMismatch);
}

TEST(Checkpoint, TruncatedPayloadAndHeader) {
  const std::string bytes = checkpoint_bytes(trained_checkpoint());
  EXPECT_EQ(load_kind(bytes.substr(0, bytes.size() - 3)), Kind::Truncated);
  EXPECT_EQ(load_kind(bytes.substr(0, 40)), Kind::Truncated);
  EXPECT_EQ(load_kind(bytes.substr(0, 6)), Kind::Truncated);
}

TEST(Checkpoint, MalformedHeaderAndTrailingBytes) {
  const std::string bytes = checkpoint_bytes(trained_checkpoint());
  EXPECT_EQ(load_kind(bytes + "x"), Kind::Malformed);
  std::string broken = bytes;
  broken[16] = '[';
  EXPECT_EQ(load_kind(broken), Kind::Malformed);
}

TEST(Checkpoint, FileRoundTripAndMissingFile) {
  const Checkpoint ck = trained_checkpoint();
  const auto path = std::filesystem::temp_directory_path() / "cuimlm_checkpoint_test.ckpt";
  save_checkpoint_file(ck, path.string());
  EXPECT_EQ(load_checkpoint_file(path.string()), ck);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint_file(path.string()), IoError);
}

}  // namespace
