#pragma once

namespace raven {
const char* version_string();
}
