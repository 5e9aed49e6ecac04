#pragma once

#define SHOTNOISE_VERSION "0.1.0"
