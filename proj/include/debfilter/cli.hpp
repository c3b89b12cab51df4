/*
 * Copyright 2026 The DebFilter Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include "debfilter/common.hpp"
#include "debfilter/offset_bank.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace debfilter {

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitProvenance = 3;
inline constexpr int kExitNumerical = 4;

// Default output directory when --out is absent.
inline constexpr const char* kOutputDirEnv = "DEBFILTER_OUT";

int exit_code_for(ErrorCode code);

// One row of a `compute` prompt list: source,target,token.
struct OffsetPromptRow {
  std::string source;
  std::string target;
  std::string token;  // surface word in the source prompt, or a slot number
};

// One row of a `generate` prompt list: occupation,prompt,targets where
// targets is "word[:+1|:-1];word2[:-1]".
struct GenerationPromptRow {
  std::string occupation;
  std::string prompt;
  std::vector<std::pair<std::string, int>> targets;
};

std::vector<OffsetPromptRow> read_offset_prompts(const std::string& path);
std::vector<GenerationPromptRow> read_generation_prompts(const std::string& path);

// Resolves a word or a slot number against a tokenized prompt.
TokenSlot resolve_token(const TokenizedPrompt& tokens, const std::string& token);

// args excludes the program name. Returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace debfilter
